"""Temporal KG ingestion, snapshots, negative sampling and synthetic data."""

from __future__ import annotations

import datetime as dt
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from spa.errors import (
    DegenerateQueryError,
    EmptyDatasetError,
    GenerationError,
    ParseError,
    UsageError,
)


class Quadruple(NamedTuple):
    subject: int
    relation: int
    object: int
    time: int


def as_quads(quads) -> np.ndarray:
    arr = np.asarray(quads, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"quadruples must be an (n, 4) array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Snapshot:
    time: int
    edges: np.ndarray  # (E, 3) rows of (subject, relation, object)
    augmented: bool = False

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])


@dataclass
class TemporalKG:
    entity_count: int
    relation_count: int
    timestep_count: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    entity_names: list[str] | None = None
    relation_names: list[str] | None = None
    snapshots: list[Snapshot] = field(init=False)

    def __post_init__(self):
        self.train, self.valid, self.test = as_quads(self.train), as_quads(self.valid), as_quads(self.test)
        for name in ("train", "valid", "test"):
            _check_bounds(getattr(self, name), self.entity_count, self.relation_count, self.timestep_count, name)
        self.snapshots = build_snapshots(self.train, self.timestep_count)
        self._augmented: dict[int, Snapshot] = {}
        self._truth: FactIndex | None = None
        self._train_truth: FactIndex | None = None

    @property
    def augmented_relation_count(self) -> int:
        return 2 * self.relation_count + 1

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def augmented(self, t: int) -> Snapshot:
        snap = self._augmented.get(t)
        if snap is None:
            snap = augment_snapshot(self.snapshots[t], self.entity_count, self.relation_count)
            self._augmented[t] = snap
        return snap

    @property
    def truth(self) -> FactIndex:
        """Index over every known fact (all splits); used for filtered ranking."""
        if self._truth is None:
            self._truth = FactIndex(np.concatenate([self.train, self.valid, self.test]))
        return self._truth

    @property
    def train_truth(self) -> FactIndex:
        if self._train_truth is None:
            self._train_truth = FactIndex(self.train)
        return self._train_truth

    def to_bytes(self) -> bytes:
        header = np.array([self.entity_count, self.relation_count, self.timestep_count], dtype="<i8")
        parts = [header.tobytes()]
        for arr in (self.train, self.valid, self.test):
            parts.append(np.array([len(arr)], dtype="<i8").tobytes())
            parts.append(arr.astype("<i8").tobytes())
        return b"".join(parts)


def _check_bounds(q: np.ndarray, n_ent: int, n_rel: int, n_time: int, what: str) -> None:
    if len(q) == 0:
        return
    if q.min() < 0:
        raise ValueError(f"{what}: negative id")
    for col, bound, label in ((0, n_ent, "subject"), (2, n_ent, "object"), (1, n_rel, "relation"), (3, n_time, "time")):
        if q[:, col].max() >= bound:
            raise ValueError(f"{what}: {label} id {q[:, col].max()} out of range (< {bound})")


class FactIndex:
    """Lookup of true answers for (s, r, ?, t) and (?, r, o, t) patterns."""

    def __init__(self, quads: np.ndarray):
        self.objects: dict[tuple[int, int, int], set[int]] = defaultdict(set)
        self.subjects: dict[tuple[int, int, int], set[int]] = defaultdict(set)
        self.facts: set[tuple[int, int, int, int]] = set()
        for s, r, o, t in as_quads(quads).tolist():
            self.objects[(s, r, t)].add(o)
            self.subjects[(r, o, t)].add(s)
            self.facts.add((s, r, o, t))

    def __contains__(self, q) -> bool:
        return tuple(int(x) for x in q) in self.facts

    def answers(self, q, side: str) -> set[int]:
        s, r, o, t = (int(x) for x in q)
        if side == "object":
            return self.objects.get((s, r, t), set())
        if side == "subject":
            return self.subjects.get((r, o, t), set())
        raise ValueError(f"side must be 'subject' or 'object', got {side!r}")


# ---------------------------------------------------------------------------
# parsing

@dataclass
class Vocab:
    entities: dict[str, int] = field(default_factory=dict)
    relations: dict[str, int] = field(default_factory=dict)
    start_date: dt.date | None = None

    @staticmethod
    def _intern(table: dict[str, int], key: str) -> int:
        idx = table.get(key)
        if idx is None:
            idx = table[key] = len(table)
        return idx

    def entity_names(self) -> list[str]:
        return list(self.entities)

    def relation_names(self) -> list[str]:
        return list(self.relations)


def parse_quadruples(paths: str | Path | Sequence[str | Path], format: str = "tsv-icews") -> tuple[list[np.ndarray], Vocab]:
    """Parse one or more ICEWS-style TSV files sharing one vocabulary.

    Strings are interned in first-appearance order across the files in the
    order given; dates become day offsets from the earliest date seen.
    """
    if format != "tsv-icews":
        raise ParseError(f"unsupported format {format!r}")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    vocab = Vocab()
    raw: list[list[tuple[int, int, int, dt.date]]] = []
    for path in paths:
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n").rstrip("\r")
                if not line.strip():
                    continue
                fields = line.split("\t")
                if len(fields) != 4:
                    raise ParseError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
                s, r, o, date = fields
                try:
                    day = dt.date.fromisoformat(date.strip())
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad date {date!r}") from None
                rows.append((Vocab._intern(vocab.entities, s), Vocab._intern(vocab.relations, r),
                             Vocab._intern(vocab.entities, o), day))
        raw.append(rows)
    if not any(raw):
        raise EmptyDatasetError(f"no quadruples found in {[str(p) for p in paths]}")
    vocab.start_date = min(day for rows in raw for *_, day in rows)
    out = [
        as_quads([(s, r, o, (day - vocab.start_date).days) for s, r, o, day in rows]) for rows in raw
    ]
    return out, vocab


def load_dataset(train: str | Path, valid: str | Path, test: str | Path) -> TemporalKG:
    (tr, va, te), vocab = parse_quadruples([train, valid, test])
    timesteps = int(max(q[:, 3].max() for q in (tr, va, te) if len(q))) + 1
    return TemporalKG(
        entity_count=len(vocab.entities),
        relation_count=len(vocab.relations),
        timestep_count=timesteps,
        train=tr, valid=va, test=te,
        entity_names=vocab.entity_names(),
        relation_names=vocab.relation_names(),
    )


def write_quadruples(path: str | Path, quads: np.ndarray, entity_names: Sequence[str],
                     relation_names: Sequence[str], start_date: dt.date = dt.date(2014, 1, 1)) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, r, o, t in as_quads(quads).tolist():
            day = start_date + dt.timedelta(days=t)
            fh.write(f"{entity_names[s]}\t{relation_names[r]}\t{entity_names[o]}\t{day.isoformat()}\n")


def write_dataset(kg: TemporalKG, directory: str | Path, start_date: dt.date = dt.date(2014, 1, 1)) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ents = kg.entity_names or [f"e{i}" for i in range(kg.entity_count)]
    rels = kg.relation_names or [f"r{i}" for i in range(kg.relation_count)]
    paths = {}
    for name in ("train", "valid", "test"):
        paths[name] = directory / f"{name}.txt"
        write_quadruples(paths[name], kg.split(name), ents, rels, start_date)
    return paths


# ---------------------------------------------------------------------------
# snapshots

def build_snapshots(quads: np.ndarray, timestep_count: int) -> list[Snapshot]:
    quads = as_quads(quads)
    if len(quads) and (quads[:, 3].min() < 0 or quads[:, 3].max() >= timestep_count):
        raise ValueError("quadruple time outside [0, timestep_count)")
    order = np.argsort(quads[:, 3], kind="stable")
    quads = quads[order]
    bounds = np.searchsorted(quads[:, 3], np.arange(timestep_count + 1))
    return [
        Snapshot(t, np.ascontiguousarray(quads[bounds[t]:bounds[t + 1], :3]))
        for t in range(timestep_count)
    ]


def augment_snapshot(snap: Snapshot, entity_count: int, relation_count: int) -> Snapshot:
    """Add inverse edges (relation r + R) and one self-loop per entity (relation 2R)."""
    if snap.augmented:
        raise UsageError(f"snapshot at time {snap.time} is already augmented")
    e = snap.edges
    inverse = np.stack([e[:, 2], e[:, 1] + relation_count, e[:, 0]], axis=1) if len(e) else e.reshape(0, 3)
    ids = np.arange(entity_count, dtype=np.int64)
    loops = np.stack([ids, np.full(entity_count, 2 * relation_count, dtype=np.int64), ids], axis=1)
    edges = np.concatenate([e.reshape(-1, 3), inverse.reshape(-1, 3), loops]).astype(np.int64)
    return Snapshot(snap.time, edges, augmented=True)


# ---------------------------------------------------------------------------
# negatives

def sample_negatives(q, side: str, k: int, truth: FactIndex | set, entity_count: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw ``k`` corrupting entities that never form a known fact with ``q``.

    Uniform without replacement when the eligible pool holds at least ``k``
    entities, with replacement otherwise.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if not isinstance(truth, FactIndex):
        truth = FactIndex(np.array(sorted(truth), dtype=np.int64).reshape(-1, 4))
    blocked = truth.answers(q, side) | {int(q[2] if side == "object" else q[0])}
    pool = np.setdiff1d(np.arange(entity_count, dtype=np.int64),
                        np.fromiter(blocked, dtype=np.int64, count=len(blocked)), assume_unique=True)
    if pool.size == 0:
        raise DegenerateQueryError(f"every entity forms a true fact for {tuple(int(x) for x in q)} on the {side} side")
    if pool.size >= k:
        return rng.choice(pool, size=k, replace=False)
    return rng.choice(pool, size=k, replace=True)


def sample_negative_block(quads: np.ndarray, side: str, k: int, truth: FactIndex, entity_count: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Negatives for a batch of queries; returns an (n, k) array.

    Each row is a uniform draw without replacement from its eligible pool,
    done for the whole block at once by keeping the k smallest random keys.
    Rows whose pool is smaller than ``k`` fall back to ``sample_negatives``.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    n = len(quads)
    col = 2 if side == "object" else 0
    blocked = np.zeros((n, entity_count), dtype=bool)
    blocked[np.arange(n), quads[:, col]] = True
    for i, q in enumerate(quads):
        ans = truth.answers(q, side)
        if ans:
            blocked[i, list(ans)] = True
    keys = rng.random((n, entity_count))
    keys[blocked] = np.inf
    out = np.argpartition(keys, k - 1, axis=1)[:, :k] if k < entity_count else np.argsort(keys, axis=1)[:, :k]
    # argpartition leaves the chosen keys unordered; sort them so rows are reproducible across numpy builds
    out = np.take_along_axis(out, np.argsort(np.take_along_axis(keys, out, axis=1), axis=1), axis=1)
    small = np.flatnonzero(entity_count - blocked.sum(axis=1) < k)
    for i in small:
        out[i] = sample_negatives(quads[i], side, k, truth, entity_count, rng)
    return out.astype(np.int64)


# ---------------------------------------------------------------------------
# statistics

def activity_histogram(kg: TemporalKG) -> np.ndarray:
    """Fraction of timesteps at which each entity has at least one neighbour."""
    active = np.zeros((kg.timestep_count, kg.entity_count), dtype=bool)
    for snap in kg.snapshots:
        if snap.edge_count:
            active[snap.time, snap.edges[:, 0]] = True
            active[snap.time, snap.edges[:, 2]] = True
    return active.sum(axis=0) / kg.timestep_count


def dataset_stats(kg: TemporalKG) -> dict:
    hist = activity_histogram(kg)
    return {
        "entityCount": kg.entity_count,
        "relationCount": kg.relation_count,
        "timestepCount": kg.timestep_count,
        "trainSize": int(len(kg.train)),
        "validSize": int(len(kg.valid)),
        "testSize": int(len(kg.test)),
        "totalSize": int(len(kg.train) + len(kg.valid) + len(kg.test)),
        "activity": {
            "mean": float(hist.mean()) if hist.size else 0.0,
            "deciles": [float(x) for x in np.quantile(hist, np.linspace(0, 1, 11))] if hist.size else [],
        },
    }


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SyntheticConfig:
    entity_count: int = 200
    relation_count: int = 5
    timestep_count: int = 50
    pattern_period: int = 5
    pattern_fraction: float = 1.0
    noise_fraction: float = 0.1
    seed: int = 0
    # number of (subject, relation) chains emitting one fact per timestep
    chain_count: int | None = None

    def __post_init__(self):
        for name in ("entity_count", "relation_count", "timestep_count", "pattern_period"):
            if getattr(self, name) < 1:
                raise GenerationError(f"{name} must be positive")
        if not self.pattern_period < self.timestep_count:
            raise GenerationError("pattern_period must be smaller than timestep_count")
        if not 0.0 < self.pattern_fraction <= 1.0:
            raise GenerationError("pattern_fraction must lie in (0, 1]")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise GenerationError("noise_fraction must lie in [0, 1)")
        if self.entity_count < self.pattern_period + 1:
            raise GenerationError("need more entities than the pattern period")


def generate_synthetic(cfg: SyntheticConfig) -> TemporalKG:
    """Build a temporal KG whose facts are mostly periodic recurrences.

    Each chain owns a subject, a relation and ``pattern_period`` distinct
    objects. A periodic chain emits ``(s, r, objects[(t + phase) % P], t)``,
    so every fact recurs exactly ``P`` steps later; the remaining chains
    pick one of their objects at random each step. A ``noise_fraction`` of
    all facts is then replaced by uniformly random triples.
    """
    rng = np.random.default_rng(cfg.seed)
    n, nr, nt, p = cfg.entity_count, cfg.relation_count, cfg.timestep_count, cfg.pattern_period
    chains = cfg.chain_count if cfg.chain_count is not None else max(1, n // 4)
    subjects = rng.choice(n, size=chains, replace=chains > n)
    relations = rng.integers(0, nr, size=chains)
    # objects come from outside the subject pool when possible, so a subject's
    # only edges at time t are its own chain's facts
    pool = np.setdiff1d(np.arange(n), subjects)
    objects = np.empty((chains, p), dtype=np.int64)
    for c in range(chains):
        candidates = pool if len(pool) >= p else np.delete(np.arange(n), subjects[c])
        objects[c] = rng.choice(candidates, size=p, replace=False)
    phases = rng.integers(0, p, size=chains)
    periodic = np.zeros(chains, dtype=bool)
    periodic[rng.permutation(chains)[: int(round(cfg.pattern_fraction * chains))]] = True

    rows = []
    for t in range(nt):
        slot = np.where(periodic, (t + phases) % p, rng.integers(0, p, size=chains))
        obj = objects[np.arange(chains), slot]
        rows.append(np.stack([subjects, relations, obj, np.full(chains, t)], axis=1))
    facts = np.concatenate(rows).astype(np.int64)
    noise = np.zeros(len(facts), dtype=bool)
    n_noise = int(round(cfg.noise_fraction * len(facts)))
    if n_noise:
        idx = rng.choice(len(facts), size=n_noise, replace=False)
        s = rng.integers(0, n, size=n_noise)
        o = (s + rng.integers(1, n, size=n_noise)) % n
        facts[idx, 0], facts[idx, 1], facts[idx, 2] = s, rng.integers(0, nr, size=n_noise), o
        noise[idx] = True
    _, first = np.unique(facts, axis=0, return_index=True)
    keep = np.sort(first)
    facts, noise = facts[keep], noise[keep]

    order = rng.permutation(len(facts))
    n_train = int(round(0.8 * len(facts)))
    n_valid = int(round(0.1 * len(facts)))
    split = np.full(len(facts), 2, dtype=np.int64)
    split[order[:n_train]] = 0
    split[order[n_train:n_train + n_valid]] = 1
    _cover_train(facts, noise, split, n, nr)

    train, valid, test = (facts[split == i] for i in range(3))
    if min(len(train), len(valid), len(test)) == 0:
        raise GenerationError(f"empty split (train={len(train)}, valid={len(valid)}, test={len(test)})")
    return TemporalKG(
        entity_count=n, relation_count=nr, timestep_count=nt,
        train=train, valid=valid, test=test,
        entity_names=[f"e{i}" for i in range(n)],
        relation_names=[f"r{i}" for i in range(nr)],
    )


def _cover_train(facts: np.ndarray, noise: np.ndarray, split: np.ndarray, n: int, nr: int) -> None:
    """Move held-out facts into train until every entity, relation and pattern template is covered."""
    def seen(key_fn, mask):
        return {key_fn(f) for f in facts[mask].tolist()}

    templates = seen(lambda f: (f[0], f[1], f[2]), split == 0)
    for i in np.flatnonzero((split != 0) & ~noise):
        key = tuple(facts[i, :3].tolist())
        if key not in templates:
            split[i] = 0
            templates.add(key)
    ents = seen(lambda f: f[0], split == 0) | seen(lambda f: f[2], split == 0)
    rels = seen(lambda f: f[1], split == 0)
    for i in np.flatnonzero(split != 0):
        s, r, o = facts[i, :3].tolist()
        if s not in ents or o not in ents or r not in rels:
            split[i] = 0
            ents.update((s, o))
            rels.add(r)


def stats_json(kg: TemporalKG) -> str:
    return json.dumps(dataset_stats(kg), indent=2, sort_keys=True)
