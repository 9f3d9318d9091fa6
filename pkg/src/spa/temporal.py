"""Temporal aggregation candidates over a window of per-snapshot features.

A window is a list of ``tau + 1`` feature matrices (oldest first, current
last), each of shape (M, d), plus an optional boolean mask of shape
(tau + 1, M) marking real (non-padded) slots. Padded slots are skipped by
the GRU and excluded from attention.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from spa.autodiff import F, Tensor
from spa.autodiff.tensor import glorot, parameter
from spa.errors import ConfigurationError, ShapeError

TEMPORAL_OPS = ("GRU", "SA", "IDENTITY")
_NEG = -1e30


def init_temporal(op: str, dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    if op == "GRU":
        w = {}
        for gate in ("z", "r", "h"):
            w[f"w_{gate}"] = glorot(rng, 2 * dim, dim)
            w[f"b_{gate}"] = parameter(np.zeros(dim))
        return w
    if op == "SA":
        return {name: glorot(rng, dim, dim) for name in ("w_q", "w_k", "w_v", "w_o")}
    if op == "IDENTITY":
        return {}
    raise ConfigurationError(f"unknown temporal op {op!r}")


def _check_window(slots: Sequence[Tensor], mask: np.ndarray | None) -> np.ndarray:
    if not slots:
        raise ShapeError("empty feature window")
    shape = slots[0].shape
    for s in slots:
        if s.shape != shape or s.ndim != 2:
            raise ShapeError(f"window slots must share one (M, d) shape, got {[x.shape for x in slots]}")
    if mask is None:
        return np.ones((len(slots), shape[0]), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.repeat(mask[:, None], shape[0], axis=1)
    if mask.shape != (len(slots), shape[0]):
        raise ShapeError(f"mask shape {mask.shape} does not match window ({len(slots)}, {shape[0]})")
    return mask


def identity_aggregate(slots: Sequence[Tensor], mask: np.ndarray | None = None) -> Tensor:
    _check_window(slots, mask)
    return slots[-1]


def gru_aggregate(slots: Sequence[Tensor], w: dict[str, Tensor], mask: np.ndarray | None = None) -> Tensor:
    """Run a GRU oldest-to-current from a zero state; padded slots carry the state through."""
    mask = _check_window(slots, mask)
    m, d = slots[0].shape
    if w["w_z"].shape != (2 * d, d):
        raise ShapeError(f"GRU gate matrix has shape {w['w_z'].shape}, expected {(2 * d, d)}")
    h = Tensor(np.zeros((m, d)))
    for x, live in zip(slots, mask):
        if not live.any():
            continue
        xh = F.concat([x, h], axis=1)
        z = F.sigmoid(xh @ w["w_z"] + w["b_z"])
        r = F.sigmoid(xh @ w["w_r"] + w["b_r"])
        cand = F.tanh(F.concat([x, r * h], axis=1) @ w["w_h"] + w["b_h"])
        new = h + z * (cand - h)
        if live.all():
            h = new
        else:
            h = h + Tensor(live[:, None].astype(np.float64)) * (new - h)
    return h


def position_encoding(num_slots: int, dim: int) -> np.ndarray:
    pos = np.arange(num_slots)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((num_slots, dim))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return pe


def sa_aggregate(slots: Sequence[Tensor], w: dict[str, Tensor], mask: np.ndarray | None = None,
                 heads: int = 4, use_position_encoding: bool = True, return_attention: bool = False):
    """Multi-head attention with the current slot as the only query."""
    mask = _check_window(slots, mask)
    s = len(slots)
    m, d = slots[0].shape
    if d % heads:
        raise ConfigurationError(f"feature width {d} is not divisible by {heads} heads")
    dh = d // heads
    if use_position_encoding:
        pe = position_encoding(s, d)
        slots = [x + Tensor(pe[j]) for j, x in enumerate(slots)]
    seq = F.transpose(F.stack(slots, axis=0), (1, 0, 2))  # (M, S, d)
    q = F.reshape(slots[-1] @ w["w_q"], (m, heads, 1, dh))
    k = F.transpose(F.reshape(seq @ w["w_k"], (m, s, heads, dh)), (0, 2, 3, 1))  # (M, H, dh, S)
    v = F.transpose(F.reshape(seq @ w["w_v"], (m, s, heads, dh)), (0, 2, 1, 3))  # (M, H, S, dh)
    logits = (q @ k) * (1.0 / math.sqrt(dh))
    if not mask.all():
        bias = np.where(mask.T, 0.0, _NEG).reshape(m, 1, 1, s)
        logits = logits + Tensor(bias)
    attn = F.softmax(logits, axis=-1)
    out = F.reshape(attn @ v, (m, d)) @ w["w_o"]
    if return_attention:
        return out, attn
    return out


def temporal_forward(op: str, slots: Sequence[Tensor], w: dict[str, Tensor], mask: np.ndarray | None = None,
                     heads: int = 4) -> Tensor:
    if op == "IDENTITY":
        return identity_aggregate(slots, mask)
    if op == "GRU":
        return gru_aggregate(slots, w, mask)
    if op == "SA":
        return sa_aggregate(slots, w, mask, heads=heads)
    raise ConfigurationError(f"unknown temporal op {op!r}")
