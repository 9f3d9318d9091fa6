"""Weight-sharing supernet over the four-module message-passing framework."""

from __future__ import annotations

import itertools
import json
import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from spa.autodiff import F, Tensor
from spa.autodiff.tensor import glorot, parameter
from spa.data import TemporalKG
from spa.errors import ConfigurationError, LoadError, ShapeError
from spa.graph import GraphBatch, build_graph
from spa.spatial import SPATIAL_OPS, init_spatial, spatial_forward
from spa.temporal import TEMPORAL_OPS, init_temporal, temporal_forward

LC_OPS = ("LC_SKIP", "LC_SUM", "LC_CONCAT")
LF_OPS = ("LF_MAX", "LF_CONCAT", "LF_SKIP", "LF_MEAN")
SLOT_OPS = {"sa": SPATIAL_OPS, "ta": TEMPORAL_OPS, "lc": LC_OPS, "lf": LF_OPS}


@dataclass(frozen=True)
class LayerChoice:
    sa: str
    ta: str
    lc: str

    def __post_init__(self):
        for slot in ("sa", "ta", "lc"):
            if getattr(self, slot) not in SLOT_OPS[slot]:
                raise ConfigurationError(f"{getattr(self, slot)!r} is not a legal {slot} operation")


@dataclass(frozen=True)
class ArchDescriptor:
    layers: tuple[LayerChoice, ...]
    lf: str

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigurationError("an architecture needs at least one layer")
        if self.lf not in LF_OPS:
            raise ConfigurationError(f"{self.lf!r} is not a legal lf operation")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def to_dict(self) -> dict:
        return {"layers": [{"sa": l.sa, "ta": l.ta, "lc": l.lc} for l in self.layers], "lf": self.lf}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj: Mapping) -> ArchDescriptor:
        if not isinstance(obj, Mapping) or set(obj) != {"layers", "lf"}:
            raise ConfigurationError(f"architecture must have exactly the keys 'layers' and 'lf', got {obj!r}")
        layers = []
        for layer in obj["layers"]:
            if not isinstance(layer, Mapping) or set(layer) != {"sa", "ta", "lc"}:
                raise ConfigurationError(f"layer must have exactly the keys sa/ta/lc, got {layer!r}")
            layers.append(LayerChoice(layer["sa"], layer["ta"], layer["lc"]))
        return cls(tuple(layers), obj["lf"])

    @classmethod
    def from_json(cls, text: str) -> ArchDescriptor:
        return cls.from_dict(json.loads(text))

    def __str__(self) -> str:
        body = "|".join(f"{l.sa},{l.ta},{l.lc}" for l in self.layers)
        return f"{body}|{self.lf}"


def uniform_arch(num_layers: int, sa: str, ta: str, lc: str, lf: str) -> ArchDescriptor:
    return ArchDescriptor(tuple(LayerChoice(sa, ta, lc) for _ in range(num_layers)), lf)


@dataclass(frozen=True)
class SearchSpace:
    """Per-layer allowed operation sets plus the global fusion set."""

    layers: tuple[tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]], ...]
    lf: tuple[str, ...] = LF_OPS

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("search space needs at least one layer")
        for layer in self.layers:
            for slot, allowed in zip(("sa", "ta", "lc"), layer):
                if not allowed:
                    raise ConfigurationError(f"empty operation set for slot {slot}")
                for op in allowed:
                    if op not in SLOT_OPS[slot]:
                        raise ConfigurationError(f"{op!r} is not a legal {slot} operation")
        if not self.lf:
            raise ConfigurationError("empty operation set for slot lf")
        for op in self.lf:
            if op not in LF_OPS:
                raise ConfigurationError(f"{op!r} is not a legal lf operation")

    @classmethod
    def full(cls, num_layers: int = 3) -> SearchSpace:
        return cls(tuple((SPATIAL_OPS, TEMPORAL_OPS, LC_OPS) for _ in range(num_layers)), LF_OPS)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def cardinality(self) -> int:
        total = len(self.lf)
        for layer in self.layers:
            total *= math.prod(len(a) for a in layer)
        return total

    def contains(self, arch: ArchDescriptor) -> bool:
        if arch.num_layers != self.num_layers or arch.lf not in self.lf:
            return False
        return all(
            c.sa in a[0] and c.ta in a[1] and c.lc in a[2] for c, a in zip(arch.layers, self.layers)
        )

    def to_dict(self) -> dict:
        return {
            "layers": [{"sa": list(a[0]), "ta": list(a[1]), "lc": list(a[2])} for a in self.layers],
            "lf": list(self.lf),
        }


def sample_path(space: SearchSpace, rng: np.random.Generator) -> ArchDescriptor:
    """Pick every slot independently and uniformly from its allowed set."""
    layers = []
    for sa, ta, lc in space.layers:
        layers.append(LayerChoice(
            sa[rng.integers(len(sa))], ta[rng.integers(len(ta))], lc[rng.integers(len(lc))]
        ))
    return ArchDescriptor(tuple(layers), space.lf[rng.integers(len(space.lf))])


def enumerate_space(space: SearchSpace) -> tuple[int, Iterator[ArchDescriptor]]:
    def gen():
        per_layer = [list(itertools.product(*layer)) for layer in space.layers]
        for combo in itertools.product(*per_layer):
            for lf in space.lf:
                yield ArchDescriptor(tuple(LayerChoice(*c) for c in combo), lf)

    return space.cardinality, gen()


def restrict_space(base: SearchSpace, fixes: Mapping[str, str]) -> SearchSpace:
    """Reduce the named slots (sa/ta/lc in every layer, or lf) to a single operation."""
    for slot, op in fixes.items():
        if slot not in SLOT_OPS:
            raise ConfigurationError(f"unknown slot {slot!r}")
        if op not in SLOT_OPS[slot]:
            raise ConfigurationError(f"{op!r} is not a legal operation for slot {slot!r}")
    layers = tuple(
        tuple((fixes[slot],) if slot in fixes else allowed for slot, allowed in zip(("sa", "ta", "lc"), layer))
        for layer in base.layers
    )
    lf = (fixes["lf"],) if "lf" in fixes else base.lf
    return SearchSpace(layers, lf)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class SupernetParams:
    """Shared embedding table plus per-layer, per-candidate weight records.

    The table holds entity rows first, then one row per augmented relation
    (original, inverse, self-loop). A standalone model is the same structure
    with only one candidate per slot.
    """

    entity_count: int
    relation_count: int
    dim: int
    num_layers: int
    spatial_heads: int = 4
    temporal_heads: int = 4
    embedding: Tensor | None = None
    spatial: list[dict[str, dict[str, Tensor]]] = field(default_factory=list)
    temporal: list[dict[str, dict[str, Tensor]]] = field(default_factory=list)
    lc_proj: list[Tensor | None] = field(default_factory=list)
    lf_proj: Tensor | None = None

    @property
    def augmented_relation_count(self) -> int:
        return 2 * self.relation_count + 1

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for i in range(self.num_layers):
            for op in SPATIAL_OPS:
                for k, v in self.spatial[i].get(op, {}).items():
                    out[f"spatial.{i}.{op}.{k}"] = v
            for op in TEMPORAL_OPS:
                for k, v in self.temporal[i].get(op, {}).items():
                    out[f"temporal.{i}.{op}.{k}"] = v
            if self.lc_proj[i] is not None:
                out[f"lc.{i}"] = self.lc_proj[i]
        if self.lf_proj is not None:
            out["lf"] = self.lf_proj
        return {k: v for k, v in out.items() if v is not None}

    def meta(self) -> dict:
        return {
            "entity_count": self.entity_count,
            "relation_count": self.relation_count,
            "dim": self.dim,
            "num_layers": self.num_layers,
            "spatial_heads": self.spatial_heads,
            "temporal_heads": self.temporal_heads,
        }

    def extract(self, arch: ArchDescriptor) -> SupernetParams:
        """Copy out the weights one architecture uses into a standalone model."""
        if arch.num_layers != self.num_layers:
            raise ConfigurationError(f"architecture has {arch.num_layers} layers, supernet has {self.num_layers}")
        copy = lambda t: parameter(t.data.copy())  # noqa: E731
        out = SupernetParams(**self.meta())
        out.embedding = copy(self.embedding)
        for i, c in enumerate(arch.layers):
            out.spatial.append({c.sa: {k: copy(v) for k, v in self.spatial[i][c.sa].items()}})
            out.temporal.append({c.ta: {k: copy(v) for k, v in self.temporal[i][c.ta].items()}})
            out.lc_proj.append(copy(self.lc_proj[i]) if c.lc == "LC_CONCAT" else None)
        out.lf_proj = copy(self.lf_proj) if arch.lf == "LF_CONCAT" else None
        return out

    def supports(self, arch: ArchDescriptor) -> bool:
        if arch.num_layers != self.num_layers:
            return False
        for i, c in enumerate(arch.layers):
            if c.sa not in self.spatial[i] or c.ta not in self.temporal[i]:
                return False
            if c.lc == "LC_CONCAT" and self.lc_proj[i] is None:
                return False
        return arch.lf != "LF_CONCAT" or self.lf_proj is not None


def init_supernet(entity_count: int, relation_count: int, dim: int, num_layers: int,
                  rng: np.random.Generator, spatial_heads: int = 4, temporal_heads: int = 4,
                  init_scale: float = 0.1) -> SupernetParams:
    if dim % 2:
        raise ConfigurationError(f"embedding width must be even, got {dim}")
    p = SupernetParams(entity_count, relation_count, dim, num_layers, spatial_heads, temporal_heads)
    n_aug = p.augmented_relation_count
    p.embedding = parameter(rng.uniform(-init_scale, init_scale, size=(entity_count + n_aug, dim)))
    for _ in range(num_layers):
        p.spatial.append({op: init_spatial(op, dim, n_aug, rng) for op in SPATIAL_OPS})
        p.temporal.append({op: init_temporal(op, dim, rng) for op in TEMPORAL_OPS})
        p.lc_proj.append(glorot(rng, 2 * dim, dim))
    p.lf_proj = glorot(rng, num_layers * dim, dim)
    return p


def init_standalone(entity_count: int, relation_count: int, dim: int, arch: ArchDescriptor,
                    rng: np.random.Generator, spatial_heads: int = 4, temporal_heads: int = 4) -> SupernetParams:
    """Fresh weights for one architecture (drawn through a full supernet, then extracted)."""
    full = init_supernet(entity_count, relation_count, dim, arch.num_layers, rng, spatial_heads, temporal_heads)
    return full.extract(arch)


# ---------------------------------------------------------------------------
# forward

def lc_apply(op: str, h_prev: Tensor, h_cur: Tensor, proj: Tensor | None = None) -> Tensor:
    if h_prev.shape != h_cur.shape:
        raise ShapeError(f"layer connection inputs differ in shape: {h_prev.shape} vs {h_cur.shape}")
    if op == "LC_SKIP":
        return h_cur
    if op == "LC_SUM":
        return h_prev + h_cur
    if op == "LC_CONCAT":
        if proj is None:
            raise ConfigurationError("LC_CONCAT needs a projection matrix")
        return F.concat([h_prev, h_cur], axis=1) @ proj
    raise ConfigurationError(f"unknown layer connection {op!r}")


def lf_apply(op: str, z_layers: Sequence[Tensor], proj: Tensor | None = None) -> Tensor:
    if not z_layers:
        raise ShapeError("layer fusion needs at least one layer")
    shape = z_layers[0].shape
    if any(z.shape != shape for z in z_layers):
        raise ShapeError(f"layer fusion inputs differ in shape: {[z.shape for z in z_layers]}")
    if op == "LF_SKIP":
        return z_layers[-1]
    if op == "LF_MEAN":
        return F.mean(F.stack(z_layers, axis=0), axis=0)
    if op == "LF_MAX":
        return F.max(F.stack(z_layers, axis=0), axis=0)
    if op == "LF_CONCAT":
        if proj is None:
            raise ConfigurationError("LF_CONCAT needs a projection matrix")
        return F.concat(list(z_layers), axis=1) @ proj
    raise ConfigurationError(f"unknown layer fusion {op!r}")


@dataclass
class Encoding:
    """Final entity features for a list of target times, stacked time-major."""

    times: tuple[int, ...]
    entity_count: int
    features: Tensor  # (len(times) * entity_count, d)
    relations: Tensor  # static relation rows for the decoder, (relation_count, d)

    def rows(self, time_positions: np.ndarray, entities: np.ndarray) -> np.ndarray:
        return np.asarray(time_positions) * self.entity_count + np.asarray(entities)


def _window_times(times: Sequence[int], tau: int) -> list[int]:
    return sorted({u for t in times for u in range(t - tau, t + 1) if u >= 0})


_GRAPH_CACHE_LIMIT = 64
_GRAPH_CACHE_LOCK = threading.RLock()


def snapshot_graph(kg: TemporalKG, window: Sequence[int], drop: Mapping[int, np.ndarray] | None = None) -> GraphBatch:
    """Union graph of the augmented snapshots at ``window``; ``drop`` removes edges per time."""
    if drop:
        snaps = []
        for t in window:
            snap = kg.augmented(t)
            if t in drop and len(drop[t]):
                keep = np.ones(snap.edge_count, dtype=bool)
                keep[drop[t]] = False
                inv = drop[t] + kg.snapshots[t].edge_count  # matching inverse edges
                keep[inv] = False
                snap = type(snap)(snap.time, snap.edges[keep], True)
            snaps.append(snap)
        return build_graph(snaps, kg.entity_count, kg.relation_count)
    with _GRAPH_CACHE_LOCK:
        cache = kg.__dict__.setdefault("_graph_cache", {})
        key = tuple(window)
        g = cache.get(key)
        if g is None:
            if len(cache) >= _GRAPH_CACHE_LIMIT:
                cache.pop(next(iter(cache)))
            g = build_graph([kg.augmented(t) for t in window], kg.entity_count, kg.relation_count)
            cache[key] = g
    return g


def supernet_forward(kg: TemporalKG, times: Sequence[int], arch: ArchDescriptor, params: SupernetParams,
                     tau: int, training: bool = False, dropout: float = 0.0,
                     rng: np.random.Generator | None = None,
                     drop_edges: Mapping[int, np.ndarray] | None = None) -> Encoding:
    """Encode every entity at each time in ``times`` with the sampled path ``arch``.

    Per layer: spatial aggregation on each window snapshot, dropout, layer
    connection (feeding the next layer) and temporal aggregation of the
    spatial outputs over the window. Fusion combines the per-layer temporal
    features. Only the weights of ``arch``'s candidates enter the graph.
    """
    if arch.num_layers != params.num_layers:
        raise ConfigurationError(f"architecture has {arch.num_layers} layers, params have {params.num_layers}")
    times = tuple(int(t) for t in times)
    for t in times:
        if not 0 <= t < kg.timestep_count:
            raise ConfigurationError(f"time {t} outside [0, {kg.timestep_count})")
    n, d = kg.entity_count, params.dim
    if n != params.entity_count or kg.relation_count != params.relation_count:
        raise ShapeError("parameters were built for a different vocabulary")
    window = _window_times(times, tau)
    pos = {t: k for k, t in enumerate(window)}
    graph = snapshot_graph(kg, window, drop_edges)

    emb = params.embedding
    n_aug = params.augmented_relation_count
    ent0, rel0 = F.split(emb, [n, n_aug], axis=0)
    h_hat = F.gather(ent0, np.tile(np.arange(n), len(window)))
    rel = rel0

    # slot j of target b reads row pos[t_b - tau + j] * n + e; padded slots read a zero row
    pad_row = len(window) * n
    ents = np.arange(n)
    slot_index, slot_mask = [], []
    for j in range(tau + 1):
        idx = np.empty(len(times) * n, dtype=np.int64)
        live = np.empty(len(times) * n, dtype=bool)
        for b, t in enumerate(times):
            u = t - tau + j
            ok = u >= 0
            idx[b * n:(b + 1) * n] = pos[u] * n + ents if ok else pad_row
            live[b * n:(b + 1) * n] = ok
        slot_index.append(idx)
        slot_mask.append(live)
    slot_mask = np.stack(slot_mask)
    zero_row = Tensor(np.zeros((1, d)))

    z_layers = []
    for i, choice in enumerate(arch.layers):
        h, rel = spatial_forward(choice.sa, graph, h_hat, params.spatial[i][choice.sa], rel,
                                 heads=params.spatial_heads)
        h = F.dropout(h, dropout, training, rng)
        h_hat = lc_apply(choice.lc, h_hat, h, params.lc_proj[i] if choice.lc == "LC_CONCAT" else None)
        if choice.ta == "IDENTITY":
            z = F.gather(h, slot_index[-1])
        else:
            padded = F.concat([h, zero_row], axis=0) if not slot_mask.all() else h
            slots = [F.gather(padded, idx) for idx in slot_index]
            z = temporal_forward(choice.ta, slots, params.temporal[i][choice.ta], slot_mask,
                                 heads=params.temporal_heads)
        z_layers.append(z)
    z = lf_apply(arch.lf, z_layers, params.lf_proj if arch.lf == "LF_CONCAT" else None)
    relations = F.split(rel0, [params.relation_count, n_aug - params.relation_count], axis=0)[0]
    return Encoding(times, n, z, relations)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SPACKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: SupernetParams, path: str | Path) -> None:
    """Write a JSON manifest followed by raw little-endian float64 blobs."""
    tensors = []
    offset = 0
    blobs = []
    for name, t in params.named_parameters().items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "endianness": "little",
        "dtype": "float64",
        "meta": params.meta(),
        "tensors": tensors,
        "payload_bytes": offset,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> SupernetParams:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    if len(blob) < 16 or blob[:8] != CHECKPOINT_MAGIC:
        raise LoadError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise LoadError(f"{path}: truncated header")
    try:
        manifest = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise LoadError(f"{path}: corrupt header") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
    if manifest.get("endianness") != "little" or manifest.get("dtype") != "float64":
        raise LoadError(f"{path}: unsupported encoding {manifest.get('endianness')}/{manifest.get('dtype')}")
    payload = blob[16 + hlen:]
    if len(payload) != manifest.get("payload_bytes"):
        raise LoadError(f"{path}: size mismatch, payload has {len(payload)} bytes, "
                        f"manifest says {manifest.get('payload_bytes')}")
    try:
        meta = manifest["meta"]
        p = SupernetParams(**meta)
        p.spatial = [{} for _ in range(p.num_layers)]
        p.temporal = [{"IDENTITY": {}} for _ in range(p.num_layers)]
        p.lc_proj = [None] * p.num_layers
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            start, nbytes = entry["offset"], entry["nbytes"]
            if nbytes != 8 * math.prod(shape) or start + nbytes > len(payload):
                raise LoadError(f"{path}: size mismatch for tensor {entry['name']}")
            arr = np.frombuffer(payload, dtype="<f8", count=math.prod(shape), offset=start)
            _assign(p, entry["name"], parameter(arr.astype(np.float64).reshape(shape)))
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{path}: malformed manifest ({exc})") from None
    if p.embedding is None:
        raise LoadError(f"{path}: missing embedding table")
    return p


def _assign(p: SupernetParams, name: str, t: Tensor) -> None:
    parts = name.split(".")
    if parts == ["embedding"]:
        p.embedding = t
    elif parts == ["lf"]:
        p.lf_proj = t
    elif parts[0] == "lc" and len(parts) == 2:
        p.lc_proj[int(parts[1])] = t
    elif parts[0] in ("spatial", "temporal") and len(parts) == 4:
        table = p.spatial if parts[0] == "spatial" else p.temporal
        table[int(parts[1])].setdefault(parts[2], {})[parts[3]] = t
    else:
        raise ValueError(f"unknown tensor name {name!r}")
