"""Disjoint-union message-passing graphs over several augmented snapshots."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from spa.data import Snapshot
from spa.errors import UsageError

EDGE_ORIGINAL, EDGE_INVERSE, EDGE_SELF = 0, 1, 2


@dataclass(frozen=True)
class GraphBatch:
    """Edges of one or more snapshots stacked into a single node space.

    Node ``k * entity_count + e`` is entity ``e`` in the k-th snapshot. An
    edge ``(s, r, o)`` carries a message from ``src = o`` to ``dst = s``.
    Edges are grouped by class (original, inverse, self-loop) so the
    direction-specific transforms act on contiguous blocks.
    """

    entity_count: int
    relation_count: int  # original relations, before augmentation
    num_snapshots: int
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    class_sizes: tuple[int, int, int] = field(default=(0, 0, 0))

    @property
    def num_nodes(self) -> int:
        return self.entity_count * self.num_snapshots

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def augmented_relation_count(self) -> int:
        return 2 * self.relation_count + 1

    @cached_property
    def relation_norm(self) -> np.ndarray:
        """1 / |N_r(s)| per edge, shape (E, 1)."""
        key = self.dst * self.augmented_relation_count + self.rel
        _, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
        return (1.0 / counts[inv]).reshape(-1, 1)

    @cached_property
    def degree_norm(self) -> np.ndarray:
        """1 / |N(s)| per edge, shape (E, 1)."""
        counts = np.bincount(self.dst, minlength=self.num_nodes)
        return (1.0 / counts[self.dst]).reshape(-1, 1)


def edge_classes(rel: np.ndarray, relation_count: int) -> np.ndarray:
    return np.where(rel == 2 * relation_count, EDGE_SELF, np.where(rel >= relation_count, EDGE_INVERSE, EDGE_ORIGINAL))


def build_graph(snapshots: Sequence[Snapshot], entity_count: int, relation_count: int) -> GraphBatch:
    srcs, dsts, rels = [], [], []
    for k, snap in enumerate(snapshots):
        if not snap.augmented:
            raise UsageError(f"snapshot at time {snap.time} must be augmented before message passing")
        e = snap.edges
        off = k * entity_count
        dsts.append(e[:, 0] + off)
        rels.append(e[:, 1])
        srcs.append(e[:, 2] + off)
    src = np.concatenate(srcs) if srcs else np.zeros(0, dtype=np.int64)
    dst = np.concatenate(dsts) if dsts else np.zeros(0, dtype=np.int64)
    rel = np.concatenate(rels) if rels else np.zeros(0, dtype=np.int64)
    cls = edge_classes(rel, relation_count)
    order = np.argsort(cls, kind="stable")
    sizes = tuple(int(x) for x in np.bincount(cls, minlength=3))
    return GraphBatch(entity_count, relation_count, len(snapshots), src[order], dst[order], rel[order], sizes)
