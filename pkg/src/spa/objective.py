"""ComplEx decoding, two-sided cross-entropy loss and filtered ranking metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from spa.autodiff import F, Tensor, no_grad
from spa.data import FactIndex, TemporalKG, as_quads
from spa.errors import ConfigurationError, NumericalError, ProtocolError
from spa.supernet import ArchDescriptor, Encoding, SupernetParams, supernet_forward

SIDES = ("object", "subject")


def _halves(x: Tensor) -> tuple[Tensor, Tensor]:
    d = x.shape[-1]
    if d % 2:
        raise ConfigurationError(f"ComplEx needs an even embedding width, got {d}")
    return tuple(F.split(x, [d // 2, d // 2], axis=-1))


def complex_score(zs, hr, zo) -> Tensor:
    """Re(<s, r, conj(o)>) over the last axis; the first half is real, the second imaginary.

    Leading axes broadcast, so one call can score a whole candidate block.
    """
    zs, hr, zo = (x if isinstance(x, Tensor) else Tensor(x) for x in (zs, hr, zo))
    s_re, s_im = _halves(zs)
    r_re, r_im = _halves(hr)
    o_re, o_im = _halves(zo)
    # (s * r) as a complex number, then the real part of its product with conj(o)
    sr_re = s_re * r_re - s_im * r_im
    sr_im = s_re * r_im + s_im * r_re
    return F.sum(sr_re * o_re + sr_im * o_im, axis=-1)


def candidate_scores(enc: Encoding, quads: np.ndarray, time_pos: np.ndarray, side: str,
                     candidates: np.ndarray) -> Tensor:
    """Scores of shape (Q, K) for replacing ``side`` of each quadruple with each candidate.

    The fixed part of the triple is folded into one query vector so each
    block is a batched matrix product rather than a broadcast over K.
    """
    quads = as_quads(quads)
    q, k = candidates.shape
    d = enc.features.shape[1]
    r_re, r_im = _halves(F.gather(enc.relations, quads[:, 1]))
    cand = F.reshape(F.gather(enc.features, enc.rows(np.repeat(time_pos, k), candidates.reshape(-1))), (q, k, d))
    if side == "object":
        s_re, s_im = _halves(F.gather(enc.features, enc.rows(time_pos, quads[:, 0])))
        query = F.concat([s_re * r_re - s_im * r_im, s_re * r_im + s_im * r_re], axis=1)
    elif side == "subject":
        o_re, o_im = _halves(F.gather(enc.features, enc.rows(time_pos, quads[:, 2])))
        query = F.concat([r_re * o_re + r_im * o_im, r_re * o_im - r_im * o_re], axis=1)
    else:
        raise ValueError(f"side must be 'subject' or 'object', got {side!r}")
    out = F.reshape(query, (q, 1, d)) @ F.transpose(cand, (0, 2, 1))
    return F.reshape(out, (q, k))


def true_class_nll(logits: Tensor) -> Tensor:
    """Per-row negative log-softmax of column 0; rows with no competitors cost nothing."""
    q, k = logits.shape
    if k == 1:
        return Tensor(np.zeros((q, 1)))
    return -F.split(F.log_softmax(logits, axis=1), [1, k - 1], axis=1)[0]


def batch_loss(quads: np.ndarray, enc: Encoding, time_pos: np.ndarray,
               negatives: Mapping[str, np.ndarray]) -> Tensor:
    """Mean over quadruples of the object-side plus subject-side negative log-softmax.

    The true entity sits in column 0 of each candidate block and is included
    in the normaliser alongside its negatives.
    """
    quads = as_quads(quads)
    total = None
    for side in SIDES:
        true = quads[:, 2] if side == "object" else quads[:, 0]
        neg = np.asarray(negatives[side], dtype=np.int64).reshape(len(quads), -1)
        cands = np.concatenate([true[:, None], neg], axis=1)
        logits = candidate_scores(enc, quads, time_pos, side, cands)
        bad = ~np.isfinite(logits.data).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NumericalError(f"non-finite score for quadruple {tuple(int(x) for x in quads[i])} ({side} side)")
        side_loss = F.sum(true_class_nll(logits))
        total = side_loss if total is None else total + side_loss
    return total * (1.0 / max(len(quads), 1))


# ---------------------------------------------------------------------------
# ranking

def filtered_rank(query, side: str, scores: np.ndarray, truth: FactIndex) -> int:
    """Rank of the true answer after removing every other known-true answer.

    Ties with remaining candidates count half, rounded up.
    """
    scores = np.asarray(scores, dtype=np.float64)
    s, r, o, t = (int(x) for x in query)
    answer = o if side == "object" else s
    if not 0 <= answer < scores.shape[0]:
        raise ProtocolError(f"true answer {answer} is not among the {scores.shape[0]} candidates")
    keep = np.ones(scores.shape[0], dtype=bool)
    for other in truth.answers(query, side):
        if other != answer and other < scores.shape[0]:
            keep[other] = False
    target = scores[answer]
    rest = scores[keep]
    greater = int(np.sum(rest > target))
    ties = int(np.sum(rest == target)) - 1
    return 1 + greater + (ties + 1) // 2


@dataclass
class EvalResult:
    mrr: float
    hits_at_1: float
    hits_at_3: float
    hits_at_10: float
    ranks: np.ndarray
    query_count: int
    queries: np.ndarray | None = field(default=None, repr=False)  # (n, 4) quadruples
    sides: list[str] | None = field(default=None, repr=False)

    @classmethod
    def from_ranks(cls, ranks: Sequence[int], queries: np.ndarray | None = None,
                   sides: list[str] | None = None) -> EvalResult:
        ranks = np.asarray(ranks, dtype=np.int64)
        if ranks.size == 0:
            raise ProtocolError("no queries to aggregate")
        if ranks.min() < 1:
            raise ProtocolError("ranks must be positive")
        # fixed-order accumulation keeps the mean deterministic
        mrr = math.fsum((1.0 / ranks).tolist()) / ranks.size
        return cls(
            mrr=mrr,
            hits_at_1=float(np.mean(ranks <= 1)),
            hits_at_3=float(np.mean(ranks <= 3)),
            hits_at_10=float(np.mean(ranks <= 10)),
            ranks=ranks,
            query_count=int(ranks.size),
            queries=queries,
            sides=sides,
        )

    def to_dict(self, include_ranks: bool = False) -> dict:
        out = {
            "mrr": self.mrr,
            "hits@1": self.hits_at_1,
            "hits@3": self.hits_at_3,
            "hits@10": self.hits_at_10,
            "queryCount": self.query_count,
        }
        if include_ranks:
            out["ranks"] = self.ranks.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write_rank_dump(self, path: str | Path) -> None:
        if self.queries is None or self.sides is None:
            raise ProtocolError("this result carries no per-query records")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("subject\trelation\tobject\ttime\tside\trank\n")
            for q, side, rank in zip(self.queries.tolist(), self.sides, self.ranks.tolist()):
                fh.write(f"{q[0]}\t{q[1]}\t{q[2]}\t{q[3]}\t{side}\t{rank}\n")


def _all_scores(enc: Encoding, quads: np.ndarray, time_pos: np.ndarray, side: str) -> np.ndarray:
    n = enc.entity_count
    z = enc.features.data.reshape(len(enc.times), n, -1)
    rel = enc.relations.data[quads[:, 1]]
    d = z.shape[2] // 2
    r_re, r_im = rel[:, :d], rel[:, d:]
    if side == "object":
        s = z[time_pos, quads[:, 0]]
        q_re = s[:, :d] * r_re - s[:, d:] * r_im
        q_im = s[:, :d] * r_im + s[:, d:] * r_re
        return np.einsum("qd,qnd->qn", q_re, z[time_pos, :, :d]) + np.einsum("qd,qnd->qn", q_im, z[time_pos, :, d:])
    o = z[time_pos, quads[:, 2]]
    c_re = r_re * o[:, :d] + r_im * o[:, d:]
    c_im = r_re * o[:, d:] - r_im * o[:, :d]
    return np.einsum("qd,qnd->qn", c_re, z[time_pos, :, :d]) + np.einsum("qd,qnd->qn", c_im, z[time_pos, :, d:])


def rank_block(enc: Encoding, quads: np.ndarray, time_pos: np.ndarray, side: str, truth: FactIndex) -> np.ndarray:
    """Vectorised filtered ranks for a block of queries against every entity."""
    scores = _all_scores(enc, quads, time_pos, side)
    col = 2 if side == "object" else 0
    answer = quads[:, col]
    target = scores[np.arange(len(quads)), answer]
    for i, q in enumerate(quads):
        others = [e for e in truth.answers(q, side) if e != answer[i]]
        if others:
            scores[i, others] = -np.inf
    greater = np.sum(scores > target[:, None], axis=1)
    ties = np.sum(scores == target[:, None], axis=1) - 1
    return 1 + greater + (ties + 1) // 2


def evaluate(kg: TemporalKG, split: str, arch: ArchDescriptor, params: SupernetParams, tau: int,
             quads: np.ndarray | None = None, times_per_chunk: int = 16) -> EvalResult:
    """Filtered MRR and Hits@{1,3,10} over both query sides of a split.

    Queries are ordered by time, then by their position in the split; for
    each quadruple the object-side rank precedes the subject-side rank.
    """
    quads = as_quads(kg.split(split) if quads is None else quads)
    if len(quads) == 0:
        raise ProtocolError(f"split {split!r} is empty")
    order = np.argsort(quads[:, 3], kind="stable")
    quads = quads[order]
    times = np.unique(quads[:, 3])
    truth = kg.truth
    ranks = np.empty((len(quads), 2), dtype=np.int64)
    with no_grad():
        for start in range(0, len(times), times_per_chunk):
            chunk = [int(t) for t in times[start:start + times_per_chunk]]
            enc = supernet_forward(kg, chunk, arch, params, tau, training=False)
            pos = {t: k for k, t in enumerate(chunk)}
            sel = np.flatnonzero(np.isin(quads[:, 3], chunk))
            block = quads[sel]
            tp = np.array([pos[int(t)] for t in block[:, 3]], dtype=np.int64)
            for j, side in enumerate(SIDES):
                ranks[sel, j] = rank_block(enc, block, tp, side, truth)
    flat = ranks.reshape(-1)
    return EvalResult.from_ranks(flat, np.repeat(quads, 2, axis=0), list(SIDES) * len(quads))
