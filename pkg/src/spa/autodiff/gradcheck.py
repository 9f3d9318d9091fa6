from __future__ import annotations

import math
from typing import Callable

import numpy as np

from spa.autodiff.tensor import Tensor, backward
from spa.errors import ConfigurationError, NumericalError


def _value(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    out = fn(Tensor(x))
    if out.size != 1:
        raise ConfigurationError(f"grad_check function must return a scalar, got shape {out.shape}")
    v = out.item()
    if not math.isfinite(v):
        raise NumericalError(f"function value is not finite ({v})")
    return v


def _central_differences(fn: Callable[[Tensor], Tensor], point: np.ndarray,
                         eps: float) -> tuple[np.ndarray, np.ndarray]:
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    noise = np.zeros_like(x)
    flat, gflat, nflat = x.reshape(-1), grad.reshape(-1), noise.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = flat[i]
        up = _value(fn, x)
        flat[i] = orig - eps
        lo = flat[i]
        down = _value(fn, x)
        flat[i] = orig
        step = hi - lo  # the step actually taken after rounding x +/- eps
        gflat[i] = (up - down) / step
        # rounding in the two function values, amplified by the division
        nflat[i] = 4.0 * np.finfo(np.float64).eps * max(abs(up), abs(down), 1.0) / step
    return grad, noise


def numeric_gradient(fn: Callable[[Tensor], Tensor], point: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences, one coordinate at a time."""
    return _central_differences(fn, point, eps)[0]


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    Discrepancies within the rounding noise of the difference quotient count
    as zero, so a linear function checks out exactly.
    """
    if eps <= 0:
        raise ConfigurationError(f"eps must be positive, got {eps}")
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    out = fn(x)
    if out.size != 1:
        raise ConfigurationError(f"grad_check function must return a scalar, got shape {out.shape}")
    if not math.isfinite(out.item()):
        raise NumericalError(f"function value is not finite ({out.item()})")
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    if analytic.size == 0:
        return 0.0
    numeric, noise = _central_differences(fn, x.data, eps)
    err = np.maximum(np.abs(analytic - numeric) - noise, 0.0) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())
