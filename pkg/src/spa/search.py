"""Supernet training, weight-inheriting random search, fine-tuning and studies."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy import stats

from spa.autodiff import OptimizerState, PlateauScheduler, Tensor, adam_step, backward, clip_gradients, no_grad
from spa.data import TemporalKG, sample_negative_block
from spa.errors import ConfigurationError, DivergenceError, NumericalError, SizeError
from spa.objective import SIDES, EvalResult, batch_loss, evaluate, rank_block
from spa.supernet import (
    ArchDescriptor,
    Encoding,
    SearchSpace,
    SupernetParams,
    init_supernet,
    restrict_space,
    sample_path,
    supernet_forward,
)

log = logging.getLogger(__name__)

SELECTION_METRICS = ("validMRR", "validLoss", "trainLoss")


@dataclass
class SearchConfig:
    num_layers: int = 3
    tau: int = 8
    dim: int = 100
    batch_size: int = 8  # snapshots (timesteps) per minibatch
    negative_ratio: int = 500
    supernet_epochs: int = 800
    search_iterations: int = 1000
    selection_metric: str = "validMRR"
    seed: int = 0
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    dropout: float = 0.1
    grad_clip: float = 1.0
    spatial_heads: int = 4
    temporal_heads: int = 4
    use_plateau: bool = False
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_learning_rate: float = 1e-6
    query_mask_rate: float = 0.0
    valid_cap: int | None = None
    top_k_reeval: int = 5
    finetune_epochs: int = 100
    finetune_trials: int = 30
    eval_every: int = 10
    fixes: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("num_layers", "tau", "dim", "batch_size", "negative_ratio", "supernet_epochs",
                     "search_iterations", "spatial_heads", "temporal_heads", "finetune_epochs",
                     "finetune_trials", "eval_every", "top_k_reeval"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % 2:
            raise ConfigurationError(f"dim must be even, got {self.dim}")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigurationError(f"selection_metric must be one of {SELECTION_METRICS}")
        if not 0.0 <= self.query_mask_rate < 1.0:
            raise ConfigurationError("query_mask_rate must lie in [0, 1)")
        if self.valid_cap is not None and self.valid_cap < 1:
            raise ConfigurationError("valid_cap must be positive")

    @classmethod
    def from_dict(cls, obj: Mapping) -> SearchConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)

    def space(self) -> SearchSpace:
        return restrict_space(SearchSpace.full(self.num_layers), self.fixes)


@dataclass
class Streams:
    """Independent random streams derived from one seed.

    Path sampling has its own stream, so a singleton space consumes the
    data stream exactly like standalone training does.
    """

    init: np.random.Generator
    path: np.random.Generator
    data: np.random.Generator
    search: np.random.Generator
    finetune: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> Streams:
        children = np.random.SeedSequence(seed).spawn(5)
        return cls(*(np.random.default_rng(c) for c in children))


@dataclass
class EpochLog:
    epoch: int
    loss: float
    learning_rate: float
    seconds: float
    valid_mrr: float | None = None


# ---------------------------------------------------------------------------
# training

def _time_index(quads: np.ndarray) -> dict[int, np.ndarray]:
    order = np.argsort(quads[:, 3], kind="stable")
    sorted_t = quads[order, 3]
    out = {}
    for t in np.unique(sorted_t):
        lo, hi = np.searchsorted(sorted_t, [t, t + 1])
        out[int(t)] = order[lo:hi]
    return out


def _grads(params: SupernetParams) -> dict[str, np.ndarray]:
    out = {}
    for name, p in params.named_parameters().items():
        if p.grad is not None:
            out[name] = p.grad
            p.grad = None
    return out


def train_epochs(kg: TemporalKG, params: SupernetParams, cfg: SearchConfig, epochs: int, streams: Streams,
                 arch: ArchDescriptor | None = None, space: SearchSpace | None = None,
                 optimizer: OptimizerState | None = None, scheduler: PlateauScheduler | None = None,
                 on_epoch: Callable[[int, SupernetParams], float | None] | None = None,
                 progress: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
    """Minibatch training where each batch is a set of timesteps.

    With ``arch`` set this trains one standalone architecture; otherwise a
    path is drawn uniformly from ``space`` for every minibatch and only its
    weights receive gradients.
    """
    if (arch is None) == (space is None):
        raise ConfigurationError("pass exactly one of arch or space")
    if len(kg.train) == 0:
        raise ConfigurationError("training split is empty")
    opt = optimizer or OptimizerState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    by_time = _time_index(kg.train)
    train_times = np.array(sorted(by_time), dtype=np.int64)
    named = params.named_parameters()
    history = []
    for epoch in range(epochs):
        start = time.perf_counter()
        perm = streams.data.permutation(train_times)
        losses = []
        for b, lo in enumerate(range(0, len(perm), cfg.batch_size)):
            times = sorted(int(t) for t in perm[lo:lo + cfg.batch_size])
            path = arch if arch is not None else sample_path(space, streams.path)
            quads, drop = _batch_targets(kg, by_time, times, cfg.query_mask_rate, streams.data)
            negatives = {
                side: sample_negative_block(quads, side, cfg.negative_ratio, kg.train_truth, kg.entity_count,
                                            streams.data)
                for side in SIDES
            }
            enc = supernet_forward(kg, times, path, params, cfg.tau, training=True, dropout=cfg.dropout,
                                   rng=streams.data, drop_edges=drop)
            pos = {t: k for k, t in enumerate(times)}
            tp = np.array([pos[int(t)] for t in quads[:, 3]], dtype=np.int64)
            try:
                loss = batch_loss(quads, enc, tp, negatives)
            except NumericalError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}") from None
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"epoch {epoch}, batch {b}: loss is {loss.item()}")
            backward(loss)
            grads, _ = clip_gradients(_grads(params), cfg.grad_clip)
            try:
                adam_step(named, grads, opt)
            except NumericalError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}") from None
            losses.append(loss.item())
        entry = EpochLog(epoch, float(np.mean(losses)), opt.learning_rate, time.perf_counter() - start)
        if on_epoch is not None:
            metric = on_epoch(epoch, params)
            if metric is not None:
                entry.valid_mrr = metric
                if scheduler is not None:
                    opt.learning_rate = scheduler.step(metric)
        history.append(entry)
        if progress is not None:
            progress(entry)
    return history


def _batch_targets(kg: TemporalKG, by_time: Mapping[int, np.ndarray], times: list[int], rate: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, dict[int, np.ndarray] | None]:
    """Training targets for a batch, optionally hiding a random share of them from the encoder."""
    if rate <= 0.0:
        return kg.train[np.concatenate([by_time[t] for t in times])], None
    parts, drop = [], {}
    for t in times:
        rows = kg.train[by_time[t]]
        k = max(1, int(round(rate * len(rows))))
        # snapshot t lists the train facts of time t in this same order
        pick = np.sort(rng.choice(len(rows), size=k, replace=False))
        parts.append(rows[pick])
        drop[t] = pick
    return np.concatenate(parts), drop


def train_supernet(kg: TemporalKG, cfg: SearchConfig, params: SupernetParams | None = None,
                   space: SearchSpace | None = None, streams: Streams | None = None,
                   progress: Callable[[EpochLog], None] | None = None) -> tuple[SupernetParams, list[EpochLog]]:
    streams = streams or Streams.from_seed(cfg.seed)
    space = space or cfg.space()
    if space.num_layers != cfg.num_layers:
        raise ConfigurationError("search space depth differs from num_layers")
    if params is None:
        params = init_supernet(kg.entity_count, kg.relation_count, cfg.dim, cfg.num_layers, streams.init,
                               cfg.spatial_heads, cfg.temporal_heads)
    scheduler, on_epoch = None, None
    if cfg.use_plateau:
        scheduler = PlateauScheduler(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience,
                                     "maximize", cfg.min_learning_rate)

        def on_epoch(epoch, p):
            probe = sample_path(space, streams.search)
            return evaluate(kg, "valid", probe, p, cfg.tau).mrr

    history = train_epochs(kg, params, cfg, cfg.supernet_epochs, streams, space=space, scheduler=scheduler,
                           on_epoch=on_epoch, progress=progress)
    return params, history


def train_standalone(kg: TemporalKG, arch: ArchDescriptor, cfg: SearchConfig, params: SupernetParams,
                     epochs: int, streams: Streams | None = None, **kwargs) -> list[EpochLog]:
    streams = streams or Streams.from_seed(cfg.seed)
    return train_epochs(kg, params, cfg, epochs, streams, arch=arch, **kwargs)


# ---------------------------------------------------------------------------
# search

@dataclass
class SearchRecord:
    descriptor: ArchDescriptor
    metric_value: float
    metric_kind: str
    wall_clock_seconds: float
    iteration_index: int

    def to_dict(self) -> dict:
        return {
            "descriptor": self.descriptor.to_dict(),
            "metricValue": self.metric_value,
            "metricKind": self.metric_kind,
            "wallClockSeconds": self.wall_clock_seconds,
            "iterationIndex": self.iteration_index,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def higher_is_better(metric: str) -> bool:
    return metric == "validMRR"


def sort_records(records: Iterable[SearchRecord]) -> list[SearchRecord]:
    """Best first; the canonical descriptor string breaks ties."""
    recs = list(records)
    if not recs:
        return recs
    sign = -1.0 if higher_is_better(recs[0].metric_kind) else 1.0
    return sorted(recs, key=lambda r: (sign * r.metric_value, str(r.descriptor)))


def mean_loss(kg: TemporalKG, quads: np.ndarray, arch: ArchDescriptor, params: SupernetParams, cfg: SearchConfig,
              negatives: Mapping[str, np.ndarray], times_per_chunk: int = 16) -> float:
    """Eval-mode loss averaged over ``quads`` with fixed negatives."""
    order = np.argsort(quads[:, 3], kind="stable")
    quads = quads[order]
    neg = {s: np.asarray(v)[order] for s, v in negatives.items()}
    times = np.unique(quads[:, 3])
    total = 0.0
    with no_grad():
        for lo in range(0, len(times), times_per_chunk):
            chunk = [int(t) for t in times[lo:lo + times_per_chunk]]
            sel = np.flatnonzero(np.isin(quads[:, 3], chunk))
            enc = supernet_forward(kg, chunk, arch, params, cfg.tau, training=False)
            pos = {t: k for k, t in enumerate(chunk)}
            tp = np.array([pos[int(t)] for t in quads[sel, 3]], dtype=np.int64)
            loss = batch_loss(quads[sel], enc, tp, {s: neg[s][sel] for s in SIDES})
            total += loss.item() * len(sel)
    return total / len(quads)


class ArchitectureScorer:
    """Scores architectures under one selection metric with inherited, frozen weights."""

    def __init__(self, kg: TemporalKG, params: SupernetParams, cfg: SearchConfig, metric: str | None = None):
        self.kg, self.params, self.cfg = kg, params, cfg
        self.metric = metric or cfg.selection_metric
        if self.metric not in SELECTION_METRICS:
            raise ConfigurationError(f"unknown selection metric {self.metric!r}")
        split = "train" if self.metric == "trainLoss" else "valid"
        quads = kg.split(split)
        if len(quads) == 0:
            raise ConfigurationError(f"selection metric {self.metric} needs a non-empty {split} split")
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(6)[5])
        self.full_quads = quads
        if cfg.valid_cap is not None and len(quads) > cfg.valid_cap:
            quads = quads[np.sort(rng.choice(len(quads), size=cfg.valid_cap, replace=False))]
        self.quads = quads
        self.negatives = None
        if self.metric != "validMRR":
            self.negatives = {
                side: sample_negative_block(quads, side, cfg.negative_ratio, kg.truth, kg.entity_count, rng)
                for side in SIDES
            }

    def __call__(self, arch: ArchDescriptor, full: bool = False) -> float:
        if self.metric == "validMRR":
            quads = self.full_quads if full else self.quads
            return evaluate(self.kg, "valid", arch, self.params, self.cfg.tau, quads=quads).mrr
        return mean_loss(self.kg, self.quads, arch, self.params, self.cfg, self.negatives)


def search_architectures(kg: TemporalKG, supernet: SupernetParams, cfg: SearchConfig,
                         space: SearchSpace | None = None, streams: Streams | None = None,
                         metric: str | None = None, workers: int = 1,
                         progress: Callable[[SearchRecord], None] | None = None) -> list[SearchRecord]:
    """Random search with inherited weights; records come back best first.

    Repeated draws are not re-evaluated. With ``workers > 1`` the distinct
    draws are scored on a thread pool and merged back in draw order.
    """
    if workers < 1:
        raise ConfigurationError(f"workers must be positive, got {workers}")
    space = space or cfg.space()
    streams = streams or Streams.from_seed(cfg.seed)
    scorer = ArchitectureScorer(kg, supernet, cfg, metric)
    seen: set[str] = set()
    draws = []
    for it in range(cfg.search_iterations):
        arch = sample_path(space, streams.search)
        if str(arch) not in seen:
            seen.add(str(arch))
            draws.append((it, arch))

    def score(item):
        it, arch = item
        start = time.perf_counter()
        value = scorer(arch)
        return SearchRecord(arch, value, scorer.metric, time.perf_counter() - start, it)

    records = []
    if workers == 1:
        results = map(score, draws)
    else:
        pool = ThreadPoolExecutor(max_workers=workers)
        results = pool.map(score, draws)
    try:
        for rec in results:
            records.append(rec)
            if progress is not None:
                progress(rec)
    finally:
        if workers > 1:
            pool.shutdown()
    records = sort_records(records)
    if scorer.metric == "validMRR" and len(scorer.quads) < len(scorer.full_quads):
        for rec in records[: cfg.top_k_reeval]:
            start = time.perf_counter()
            rec.metric_value = scorer(rec.descriptor, full=True)
            rec.wall_clock_seconds += time.perf_counter() - start
        head = sort_records(records[: cfg.top_k_reeval])
        records = head + records[cfg.top_k_reeval:]
    return records


# ---------------------------------------------------------------------------
# fine-tuning

@dataclass
class FinetuneSpace:
    spatial_head_choices: tuple[int, ...] = (2, 4, 8)
    temporal_head_choices: tuple[int, ...] = (2, 4, 8)
    weight_decay_range: tuple[float, float] = (1e-5, 1e-3)
    trial_count: int = 30

    def __post_init__(self):
        if self.trial_count < 1:
            raise ConfigurationError("trial_count must be at least 1")
        lo, hi = self.weight_decay_range
        if not 0 < lo <= hi:
            raise ConfigurationError("weight decay range must be positive and ordered")
        if not self.spatial_head_choices or not self.temporal_head_choices:
            raise ConfigurationError("head choices must be non-empty")

    def sample(self, rng: np.random.Generator, dim: int) -> dict:
        sh = [h for h in self.spatial_head_choices if dim % h == 0] or [1]
        th = [h for h in self.temporal_head_choices if dim % h == 0] or [1]
        lo, hi = self.weight_decay_range
        return {
            "spatial_heads": int(sh[rng.integers(len(sh))]),
            "temporal_heads": int(th[rng.integers(len(th))]),
            "weight_decay": float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
        }


@dataclass
class FinetuneResult:
    params: SupernetParams
    valid: EvalResult
    test: EvalResult
    best_hyperparameters: dict
    trials: list[dict]


def _snapshot(params: SupernetParams) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.named_parameters().items()}


def _restore(params: SupernetParams, saved: Mapping[str, np.ndarray]) -> None:
    for k, v in params.named_parameters().items():
        v.data = saved[k].copy()


def fit_standalone(kg: TemporalKG, arch: ArchDescriptor, cfg: SearchConfig, epochs: int, seed: int,
                   hyper: Mapping | None = None, progress: Callable[[EpochLog], None] | None = None
                   ) -> tuple[SupernetParams, float, list[EpochLog]]:
    """Train one architecture from scratch, keeping the weights with the best validation MRR."""
    hyper = dict(hyper or {})
    streams = Streams.from_seed(seed)
    full = init_supernet(kg.entity_count, kg.relation_count, cfg.dim, arch.num_layers, streams.init,
                         hyper.get("spatial_heads", cfg.spatial_heads), hyper.get("temporal_heads", cfg.temporal_heads))
    params = full.extract(arch)
    opt = OptimizerState(learning_rate=cfg.learning_rate, weight_decay=hyper.get("weight_decay", cfg.weight_decay))
    sched = PlateauScheduler(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience, "maximize",
                             cfg.min_learning_rate)
    best = {"mrr": -1.0, "weights": None}

    def on_epoch(epoch, p):
        if (epoch + 1) % cfg.eval_every and epoch + 1 != epochs:
            return None
        mrr = evaluate(kg, "valid", arch, p, cfg.tau).mrr
        if mrr > best["mrr"]:
            best["mrr"], best["weights"] = mrr, _snapshot(p)
        return mrr

    history = train_epochs(kg, params, cfg, epochs, streams, arch=arch, optimizer=opt, scheduler=sched,
                           on_epoch=on_epoch, progress=progress)
    _restore(params, best["weights"])
    return params, best["mrr"], history


def finetune(kg: TemporalKG, arch: ArchDescriptor, cfg: SearchConfig, space: FinetuneSpace | None = None,
             progress: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Seeded random search over the fine-tuning space; the winner is picked on validation MRR only."""
    space = space or FinetuneSpace(trial_count=cfg.finetune_trials)
    rng = Streams.from_seed(cfg.seed).finetune
    trials, best = [], None
    for i in range(space.trial_count):
        hyper = space.sample(rng, cfg.dim)
        seed = int(rng.integers(2**63 - 1))
        entry = {"trial": i, "seed": seed, **hyper}
        try:
            params, mrr, _ = fit_standalone(kg, arch, cfg, cfg.finetune_epochs, seed, hyper)
        except NumericalError as exc:
            entry["error"] = str(exc)
            trials.append(entry)
            if progress:
                progress(entry)
            continue
        entry["validMRR"] = mrr
        trials.append(entry)
        if progress:
            progress(entry)
        if best is None or mrr > best[0]:
            best = (mrr, params, hyper)
    if best is None:
        raise DivergenceError(f"all {space.trial_count} fine-tuning trials diverged: {json.dumps(trials)}")
    _, params, hyper = best
    valid = evaluate(kg, "valid", arch, params, cfg.tau)
    test = evaluate(kg, "test", arch, params, cfg.tau)
    return FinetuneResult(params, valid, test, hyper, trials)


# ---------------------------------------------------------------------------
# studies

def spearman(a: Iterable[float], b: Iterable[float]) -> float:
    return float(stats.spearmanr(list(a), list(b)).statistic)


def rank_correlation_study(kg: TemporalKG, supernet: SupernetParams, n: int, standalone_epochs: int,
                           cfg: SearchConfig, space: SearchSpace | None = None
                           ) -> tuple[float, list[tuple[ArchDescriptor, float, float]]]:
    """Spearman correlation between inherited-weight and trained-from-scratch validation MRR."""
    if n < 3:
        raise SizeError(f"need at least 3 architectures, got {n}")
    space = space or cfg.space()
    if space.cardinality < n:
        raise SizeError(f"search space holds {space.cardinality} architectures, fewer than {n}")
    rng = Streams.from_seed(cfg.seed).search
    archs, seen = [], set()
    while len(archs) < n:
        a = sample_path(space, rng)
        if str(a) not in seen:
            seen.add(str(a))
            archs.append(a)
    pairs = []
    for k, arch in enumerate(archs):
        shared = evaluate(kg, "valid", arch, supernet, cfg.tau).mrr
        _, alone, _ = fit_standalone(kg, arch, cfg, standalone_epochs, cfg.seed + 1000 + k)
        pairs.append((arch, shared, alone))
    rho = spearman([p[1] for p in pairs], [p[2] for p in pairs])
    return rho, pairs


def random_embedding_baseline(kg: TemporalKG, cfg: SearchConfig, split: str = "test") -> EvalResult:
    """ComplEx over an untrained embedding table with no message passing."""
    rng = Streams.from_seed(cfg.seed).init
    table = rng.uniform(-0.1, 0.1, size=(kg.entity_count + kg.augmented_relation_count, cfg.dim))
    quads = kg.split(split)
    times = tuple(int(t) for t in np.unique(quads[:, 3]))
    pos = {t: k for k, t in enumerate(times)}
    feats = np.tile(table[: kg.entity_count], (len(times), 1))
    enc = Encoding(times, kg.entity_count, Tensor(feats), Tensor(table[kg.entity_count:kg.entity_count + kg.relation_count]))
    tp = np.array([pos[int(t)] for t in quads[:, 3]], dtype=np.int64)
    ranks = np.stack([rank_block(enc, quads, tp, side, kg.truth) for side in SIDES], axis=1).reshape(-1)
    return EvalResult.from_ranks(ranks)


@dataclass
class PipelineResult:
    architecture: ArchDescriptor
    records: list[SearchRecord]
    finetune: FinetuneResult
    supernet: SupernetParams
    train_log: list[EpochLog]
    seconds: dict[str, float]

    def report(self, cfg: SearchConfig) -> dict:
        return {
            "architecture": self.architecture.to_dict(),
            "valid": self.finetune.valid.to_dict(),
            "test": self.finetune.test.to_dict(),
            "bestHyperparameters": self.finetune.best_hyperparameters,
            "config": cfg.to_dict(),
            "wallClockSeconds": self.seconds,
        }


def run_pipeline(kg: TemporalKG, cfg: SearchConfig, space: SearchSpace | None = None,
                 supernet: SupernetParams | None = None, train_log: list[EpochLog] | None = None,
                 metric: str | None = None) -> PipelineResult:
    """Supernet training, search, then fine-tuning of the selected architecture."""
    space = space or cfg.space()
    timings = {}
    t0 = time.perf_counter()
    if supernet is None:
        supernet, train_log = train_supernet(kg, cfg, space=space)
    timings["supernet"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    records = search_architectures(kg, supernet, cfg, space=space, metric=metric)
    timings["search"] = time.perf_counter() - t1
    best = records[0].descriptor
    t2 = time.perf_counter()
    tuned = finetune(kg, best, cfg)
    timings["finetune"] = time.perf_counter() - t2
    timings["total"] = time.perf_counter() - t0
    return PipelineResult(best, records, tuned, supernet, train_log or [], timings)
