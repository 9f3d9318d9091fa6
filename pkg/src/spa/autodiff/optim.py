"""Adam with decoupled weight decay, global-norm clipping and a plateau scheduler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from spa.autodiff.tensor import Tensor
from spa.errors import ConfigurationError, NumericalError


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter update counts; a supernet candidate is only stepped when sampled
    param_steps: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight decay must be non-negative, got {self.weight_decay}")


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """Apply one bias-corrected Adam update in place.

    Only parameters named in ``grads`` move; the rest (and their moments) are
    left bitwise untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise ConfigurationError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")

    b1, b2 = state.beta1, state.beta2
    lr = state.learning_rate
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        t = state.param_steps.get(name, 0) + 1
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if state.weight_decay > 0:
            update = update + lr * state.weight_decay * p.data
        p.data = p.data - update
        state.first_moment[name] = m
        state.second_moment[name] = v
        state.param_steps[name] = t
    state.step_count += 1


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ConfigurationError(f"max_norm must be positive, got {max_norm}")
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return dict(grads), total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


@dataclass
class PlateauScheduler:
    learning_rate: float
    factor: float = 0.5
    patience: int = 10
    mode: str = "maximize"
    min_learning_rate: float = 0.0
    best_metric: float | None = None
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigurationError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be positive, got {self.patience}")
        if self.mode not in ("maximize", "minimize"):
            raise ConfigurationError(f"mode must be maximize or minimize, got {self.mode!r}")

    def _improves(self, metric: float) -> bool:
        if self.best_metric is None:
            return True
        if self.mode == "maximize":
            return metric > self.best_metric
        return metric < self.best_metric

    def step(self, metric: float) -> float:
        if not math.isfinite(metric):
            raise NumericalError(f"plateau scheduler got non-finite metric {metric}")
        if self._improves(metric):
            self.best_metric = metric
            self.epochs_since_improvement = 0
            return self.learning_rate
        self.epochs_since_improvement += 1
        if self.epochs_since_improvement >= self.patience:
            self.learning_rate = max(self.learning_rate * self.factor, self.min_learning_rate)
            self.epochs_since_improvement = 0
        return self.learning_rate


def plateau_step(sched: PlateauScheduler, metric: float) -> float:
    return sched.step(metric)
