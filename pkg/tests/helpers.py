"""Shared fixtures: tiny random graphs and a gradient check over named inputs."""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from spa.autodiff import F, Tensor, grad_check
from spa.data import Snapshot, TemporalKG, augment_snapshot
from spa.supernet import supernet_forward


def random_snapshot(rng: np.random.Generator, entities: int, relations: int, edges: int) -> Snapshot:
    s = rng.integers(0, entities, edges)
    o = (s + rng.integers(1, entities, edges)) % entities
    r = rng.integers(0, relations, edges)
    triples = np.unique(np.stack([s, r, o], axis=1), axis=0)
    return augment_snapshot(Snapshot(0, triples), entities, relations)


def max_grad_error(build: Callable[[Mapping[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray],
                   rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Worst grad_check error over every named input of ``build``.

    The output is contracted with a fixed random tensor so every output
    coordinate contributes to the scalar.
    """
    probe_out = build({k: Tensor(v) for k, v in inputs.items()})
    weights = Tensor(rng.normal(size=probe_out.shape))
    worst = 0.0
    for name in inputs:
        def fn(t, name=name):
            args = {k: (t if k == name else Tensor(v)) for k, v in inputs.items()}
            return F.sum(build(args) * weights)

        worst = max(worst, grad_check(fn, inputs[name], eps))
    return worst


def random_kg(rng: np.random.Generator) -> TemporalKG:
    """Small random KG: at most 20 entities, 5 relations and 10 timesteps."""
    n, r, t = int(rng.integers(3, 21)), int(rng.integers(1, 6)), int(rng.integers(1, 11))
    size = int(rng.integers(6, 40))
    q = np.unique(np.column_stack([rng.integers(0, n, size), rng.integers(0, r, size),
                                   rng.integers(0, n, size), rng.integers(0, t, size)]), axis=0)
    q = q[rng.permutation(len(q))]
    a, b = len(q) * 3 // 5, len(q) * 4 // 5
    return TemporalKG(n, r, t, q[:a], q[a:b], q[b:])


def brute_force_ranks(kg, split, arch, params, tau):
    """Independent evaluator: one query at a time, Python complex arithmetic, explicit filtering."""
    quads = kg.split(split)
    order = np.argsort(quads[:, 3], kind="stable")
    everything = {tuple(x) for x in np.concatenate([kg.train, kg.valid, kg.test]).tolist()}
    ranks = []
    for s, r, o, t in quads[order].tolist():
        enc = supernet_forward(kg, [t], arch, params, tau)
        z = enc.features.data
        rel = enc.relations.data[r]
        half = z.shape[1] // 2
        cz = lambda v: [complex(a, b) for a, b in zip(v[:half], v[half:])]  # noqa: E731

        def score(a, b):
            return sum(x * y * w.conjugate() for x, y, w in zip(cz(z[a]), cz(rel), cz(z[b]))).real

        target = score(s, o)
        for side in ("object", "subject"):
            if side == "object":
                others = [score(s, e) for e in range(kg.entity_count)
                          if e != o and (s, r, e, t) not in everything]
            else:
                others = [score(e, o) for e in range(kg.entity_count)
                          if e != s and (e, r, o, t) not in everything]
            greater = sum(1 for v in others if v > target)
            ties = sum(1 for v in others if v == target)
            ranks.append(1 + greater + math.ceil(ties / 2))
    return ranks
