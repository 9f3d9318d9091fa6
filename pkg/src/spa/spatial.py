"""Spatial aggregation candidates: RGCN, RGAT and CompGCN message passing."""

from __future__ import annotations

import math

import numpy as np

from spa.autodiff import F, Tensor
from spa.autodiff.tensor import apply_primitive, glorot, parameter
from spa.data import Snapshot
from spa.errors import ConfigurationError, ShapeError, UsageError
from spa.graph import GraphBatch, build_graph

SPATIAL_OPS = ("RGCN", "RGAT", "COMPGCN")

Weights = dict[str, Tensor]


def num_bases(augmented_relations: int) -> int:
    return min(8, augmented_relations)


def init_spatial(op: str, dim: int, augmented_relations: int, rng: np.random.Generator) -> Weights:
    if op == "RGCN":
        b = num_bases(augmented_relations)
        bound = math.sqrt(6.0 / (2 * dim))
        return {
            "bases": parameter(rng.uniform(-bound, bound, size=(b, dim, dim))),
            "coeffs": glorot(rng, augmented_relations, b),
            "bias": parameter(np.zeros(dim)),
        }
    if op == "RGAT":
        bound = math.sqrt(6.0 / (2 * dim))
        return {
            "transform": parameter(rng.uniform(-bound, bound, size=(augmented_relations, dim, dim))),
            "attn_dst": glorot(rng, dim, 1, shape=(dim,)),
            "attn_src": glorot(rng, dim, 1, shape=(dim,)),
            "proj": glorot(rng, dim, dim),
            "bias": parameter(np.zeros(dim)),
        }
    if op == "COMPGCN":
        return {
            "w_in": glorot(rng, dim, dim),
            "w_out": glorot(rng, dim, dim),
            "w_self": glorot(rng, dim, dim),
            "w_rel": glorot(rng, dim, dim),
            "bias": parameter(np.zeros(dim)),
        }
    raise ConfigurationError(f"unknown spatial op {op!r}")


def _as_graph(graph: GraphBatch | Snapshot, h: Tensor, rel_emb: Tensor) -> GraphBatch:
    if isinstance(graph, Snapshot):
        if not graph.augmented:
            raise UsageError("spatial aggregation needs an augmented snapshot")
        n_rel = (rel_emb.shape[0] - 1) // 2
        if graph.edge_count and graph.edges[:, [0, 2]].max() >= h.shape[0]:
            raise ShapeError(f"snapshot references entity {graph.edges[:, [0, 2]].max()}, "
                             f"feature matrix has {h.shape[0]} rows")
        graph = build_graph([graph], h.shape[0], n_rel)
    if h.ndim != 2 or h.shape[0] != graph.num_nodes:
        raise ShapeError(f"feature matrix has shape {h.shape}, graph has {graph.num_nodes} nodes")
    if rel_emb.ndim != 2 or rel_emb.shape[0] != graph.augmented_relation_count:
        raise ShapeError(
            f"relation features have {rel_emb.shape[0]} rows, expected {graph.augmented_relation_count}"
        )
    if rel_emb.shape[1] != h.shape[1]:
        raise ShapeError(f"relation width {rel_emb.shape[1]} != entity width {h.shape[1]}")
    return graph


def rgcn_forward(graph, h: Tensor, w: Weights, rel_emb: Tensor) -> tuple[Tensor, Tensor]:
    """Basis-decomposed relational convolution with per-relation mean normalisation."""
    g = _as_graph(graph, h, rel_emb)
    bases, coeffs = w["bases"], w["coeffs"]
    b, d, _ = bases.shape
    if d != h.shape[1]:
        raise ShapeError(f"basis width {d} != feature width {h.shape[1]}")
    n_rel = coeffs.shape[0]
    # per-relation matrices W_r = sum_b a_rb V_b, applied to every node at once
    per_rel = F.reshape(coeffs @ F.reshape(bases, (b, d * d)), (n_rel, d, d))
    stacked = F.reshape(F.transpose(per_rel, (1, 0, 2)), (d, n_rel * d))
    hw = F.reshape(h @ stacked, (g.num_nodes * n_rel, d))
    msg = F.gather(hw, g.src * n_rel + g.rel) * Tensor(g.relation_norm)
    agg = F.scatter_add(msg, g.dst, g.num_nodes)
    return F.relu(agg + w["bias"]), rel_emb


def rgat_forward(graph, h: Tensor, w: Weights, rel_emb: Tensor, heads: int = 4,
                 return_attention: bool = False):
    """Relational attention: per-relation transforms, one softmax over each in-neighbourhood."""
    g = _as_graph(graph, h, rel_emb)
    n_rel, d, _ = w["transform"].shape
    if d % heads:
        raise ConfigurationError(f"feature width {d} is not divisible by {heads} heads")
    dh = d // heads
    stacked = F.reshape(F.transpose(w["transform"], (1, 0, 2)), (d, n_rel * d))
    hw = F.reshape(h @ stacked, (g.num_nodes * n_rel, d))
    wo = F.gather(hw, g.src * n_rel + g.rel)
    ws = F.gather(hw, g.dst * n_rel + g.rel)
    score = ws * w["attn_dst"] + wo * w["attn_src"]
    logits = F.leaky_relu(F.sum(F.reshape(score, (g.num_edges, heads, dh)), axis=2), 0.2)
    alpha = F.segment_softmax(logits, g.dst, g.num_nodes)
    msg = F.reshape(F.reshape(wo, (g.num_edges, heads, dh)) * F.reshape(alpha, (g.num_edges, heads, 1)),
                    (g.num_edges, d))
    agg = F.scatter_add(msg, g.dst, g.num_nodes)
    out = F.relu(agg @ w["proj"] + w["bias"])
    if return_attention:
        return out, rel_emb, alpha
    return out, rel_emb


def compose(h_src: Tensor, z_rel: Tensor, mode: str = "mult") -> Tensor:
    if mode == "mult":
        return h_src * z_rel
    if mode == "sub":
        return h_src - z_rel
    raise ConfigurationError(f"unknown composition {mode!r}")


def compgcn_forward(graph, h: Tensor, w: Weights, rel_emb: Tensor,
                    composition: str = "mult") -> tuple[Tensor, Tensor]:
    """Composition-based convolution; returns entity features and updated relation features."""
    g = _as_graph(graph, h, rel_emb)
    x = compose(F.gather(h, g.src), F.gather(rel_emb, g.rel), composition)
    blocks = []
    start = 0
    for size, key in zip(g.class_sizes, ("w_out", "w_in", "w_self")):
        if size:
            part = _slice_rows(x, start, size, g.num_edges)
            blocks.append(part @ w[key])
        start += size
    msg = blocks[0] if len(blocks) == 1 else F.concat(blocks, axis=0)
    agg = F.scatter_add(msg * Tensor(g.degree_norm), g.dst, g.num_nodes)
    return F.relu(agg + w["bias"]), rel_emb @ w["w_rel"]


def _slice_rows(x: Tensor, start: int, size: int, total: int) -> Tensor:
    if start == 0 and size == total:
        return x
    return apply_primitive("split", (x,), {"axis": 0, "start": start, "stop": start + size})


def spatial_forward(op: str, graph, h: Tensor, w: Weights, rel_emb: Tensor, heads: int = 4,
                    composition: str = "mult") -> tuple[Tensor, Tensor]:
    if op == "RGCN":
        return rgcn_forward(graph, h, w, rel_emb)
    if op == "RGAT":
        return rgat_forward(graph, h, w, rel_emb, heads=heads)
    if op == "COMPGCN":
        return compgcn_forward(graph, h, w, rel_emb, composition=composition)
    raise ConfigurationError(f"unknown spatial op {op!r}")
