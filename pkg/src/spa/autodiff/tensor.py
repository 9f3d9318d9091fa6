"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation is a named primitive registered in
``PRIMITIVES``. A primitive's forward kernel returns the output array and a
closure mapping the output cotangent to one cotangent per input (``None``
for inputs that need no gradient). ``backward`` walks the recorded graph in
reverse topological order and frees it afterwards.
"""

from __future__ import annotations

import builtins
import contextlib
import itertools
import math
import threading
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from spa.errors import ConfigurationError, GatherIndexError, ShapeError, UsageError

_ids = itertools.count()
_state = threading.local()  # per-thread recording switch, so worker threads can evaluate under no_grad


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "_op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self._op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.id = next(_ids)
        t._op = None
        t._parents = ()
        t._vjp = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    @property
    def provenance(self) -> tuple[str, tuple[int, ...]] | None:
        if self._op is None:
            return None
        return self._op, tuple(p.id for p in self._parents)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive registry

Kernel = Callable[..., tuple[np.ndarray, Callable[[np.ndarray], Sequence[np.ndarray | None]]]]
PRIMITIVES: dict[str, Kernel] = {}


def primitive(name: str):
    def register(fn: Kernel) -> Kernel:
        PRIMITIVES[name] = fn
        return fn

    return register


def apply_primitive(name: str, inputs: Sequence[Tensor], attrs: dict[str, Any] | None = None) -> Tensor:
    try:
        kernel = PRIMITIVES[name]
    except KeyError:
        raise ConfigurationError(f"unknown primitive {name!r}") from None
    inputs = tuple(as_tensor(x) for x in inputs)
    out, vjp = kernel(*(x.data for x in inputs), **(attrs or {}))
    result = Tensor._wrap(out)
    if _grad_enabled() and any(x.requires_grad for x in inputs):
        result.requires_grad = True
        result._op = name
        result._parents = inputs
        result._vjp = vjp
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


@primitive("add")
def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@primitive("sub")
def _sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@primitive("mul")
def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@primitive("div")
def _div(a, b):
    _broadcast_shape("div", a, b)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


@primitive("scalar_mul")
def _scalar_mul(a, *, scalar: float):
    return a * scalar, lambda g: (g * scalar,)


@primitive("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a @ b

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2:
            # fold the batch axes into rows instead of summing per-batch outer products
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


@primitive("transpose")
def _transpose(a, *, axes: tuple[int, ...] | None = None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return np.transpose(a, axes), lambda g: (np.transpose(g, inv),)


@primitive("reshape")
def _reshape(a, *, shape: tuple[int, ...]):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


@primitive("concat")
def _concat(*xs, axis: int = 0):
    if not xs:
        raise ShapeError("concat of zero tensors")
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax
        ):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {[x.shape for x in xs]}")
    out = np.concatenate(xs, axis=ax)
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=ax))


@primitive("split")
def _split(a, *, axis: int, start: int, stop: int):
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"split [{start}:{stop}] out of range for axis of length {a.shape[ax]}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros_like(a)
        full[idx] = g
        return (full,)

    return a[idx], vjp


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@primitive("sum")
def _sum(a, *, axis: int | None = None, keepdims: bool = False):
    out = np.sum(a, axis=axis, keepdims=keepdims)
    return out, lambda g: (_expand(g, a.shape, axis, keepdims).copy(),)


@primitive("mean")
def _mean(a, *, axis: int | None = None, keepdims: bool = False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    n = a.size if axis is None else a.shape[axis]
    return out, lambda g: (_expand(g, a.shape, axis, keepdims) / n,)


@primitive("max")
def _max(a, *, axis: int, keepdims: bool = False):
    ax = axis % a.ndim
    arg = np.argmax(a, axis=ax)  # first maximal element wins ties
    out = np.take_along_axis(a, np.expand_dims(arg, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def vjp(g):
        full = np.zeros_like(a)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(full, np.expand_dims(arg, ax), gk, axis=ax)
        return (full,)

    return out, vjp


@primitive("sigmoid")
def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, lambda g: (g * out * (1.0 - out),)


@primitive("tanh")
def _tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


@primitive("relu")
def _relu(a):
    mask = a > 0
    return np.where(mask, a, 0.0), lambda g: (np.where(mask, g, 0.0),)


@primitive("leaky_relu")
def _leaky_relu(a, *, slope: float = 0.2):
    factor = np.where(a > 0, 1.0, slope)
    return a * factor, lambda g: (g * factor,)


@primitive("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@primitive("log")
def _log(a):
    return np.log(a), lambda g: (g / a,)


@primitive("softmax")
def _softmax(a, *, axis: int = -1):
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)
    return out, lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


@primitive("log_softmax")
def _log_softmax(a, *, axis: int = -1):
    shifted = a - np.max(a, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return out, lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),)


def _segment_sum(values: np.ndarray, idx: np.ndarray, num_rows: int) -> np.ndarray:
    """Sum rows of ``values`` into ``num_rows`` buckets; a sparse product beats ``np.add.at``."""
    n = idx.shape[0]
    flat = values.reshape(n, -1)
    sel = sparse.csr_matrix((np.ones(n), (idx.reshape(-1), np.arange(n))), shape=(num_rows, n))
    return np.asarray(sel @ flat).reshape((num_rows,) + values.shape[1:])


def _check_index(idx: np.ndarray, n: int, what: str) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise GatherIndexError(f"{what}: indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise GatherIndexError(f"{what}: index out of range for {n} rows")
    return idx


@primitive("gather")
def _gather(a, *, index):
    idx = _check_index(index, a.shape[0], "gather")

    def vjp(g):
        if idx.ndim == 1:
            return (_segment_sum(g, idx, a.shape[0]),)
        full = np.zeros_like(a)
        np.add.at(full, idx, g)
        return (full,)

    return a[idx], vjp


@primitive("scatter_add")
def _scatter_add(a, *, index, num_rows: int):
    idx = _check_index(index, num_rows, "scatter_add")
    if idx.shape != a.shape[:1]:
        raise ShapeError(f"scatter_add: {idx.shape[0]} indices for {a.shape[0]} value rows")
    return _segment_sum(a, idx, num_rows), lambda g: (g[idx],)


@primitive("segment_softmax")
def _segment_softmax(a, *, segments, num_segments: int):
    """Softmax of rows of ``a`` within groups sharing a segment id (per column)."""
    seg = _check_index(segments, num_segments, "segment_softmax")
    seg_max = np.full((num_segments,) + a.shape[1:], -np.inf)
    np.maximum.at(seg_max, seg, a)
    e = np.exp(a - seg_max[seg])
    denom = _segment_sum(e, seg, num_segments)
    out = e / denom[seg]

    def vjp(g):
        dot = _segment_sum(g * out, seg, num_segments)
        return (out * (g - dot[seg]),)

    return out, vjp


@primitive("dropout")
def _dropout(a, *, rate: float, training: bool, rng: np.random.Generator | None = None):
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a, lambda g: (g,)
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return a * mask, lambda g: (g * mask,)


# ---------------------------------------------------------------------------
# functional front end

def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def div(a, b):
    return apply_primitive("div", (a, b))


def scalar_mul(a, scalar: float):
    return apply_primitive("scalar_mul", (a,), {"scalar": float(scalar)})


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def transpose(a, axes: Sequence[int] | None = None):
    return apply_primitive("transpose", (a,), {"axes": None if axes is None else tuple(axes)})


def reshape(a, shape: Sequence[int]):
    return apply_primitive("reshape", (a,), {"shape": tuple(shape)})


def concat(xs: Sequence[Tensor], axis: int = 0):
    return apply_primitive("concat", tuple(xs), {"axis": axis})


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if builtins.sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(apply_primitive("split", (a,), {"axis": axis, "start": start, "stop": start + n}))
        start += n
    return out


def stack(xs: Sequence[Tensor], axis: int = 0):
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


def sum(a, axis: int | None = None, keepdims: bool = False):  # noqa: A001
    return apply_primitive("sum", (a,), {"axis": axis, "keepdims": keepdims})


def mean(a, axis: int | None = None, keepdims: bool = False):
    return apply_primitive("mean", (a,), {"axis": axis, "keepdims": keepdims})


def max(a, axis: int, keepdims: bool = False):  # noqa: A001
    return apply_primitive("max", (a,), {"axis": axis, "keepdims": keepdims})


def sigmoid(a):
    return apply_primitive("sigmoid", (a,))


def tanh(a):
    return apply_primitive("tanh", (a,))


def relu(a):
    return apply_primitive("relu", (a,))


def leaky_relu(a, slope: float = 0.2):
    return apply_primitive("leaky_relu", (a,), {"slope": slope})


def exp(a):
    return apply_primitive("exp", (a,))


def log(a):
    return apply_primitive("log", (a,))


def softmax(a, axis: int = -1):
    return apply_primitive("softmax", (a,), {"axis": axis})


def log_softmax(a, axis: int = -1):
    return apply_primitive("log_softmax", (a,), {"axis": axis})


def gather(a, index):
    return apply_primitive("gather", (a,), {"index": np.asarray(index)})


def scatter_add(a, index, num_rows: int):
    return apply_primitive("scatter_add", (a,), {"index": np.asarray(index), "num_rows": int(num_rows)})


def segment_softmax(a, segments, num_segments: int):
    return apply_primitive(
        "segment_softmax", (a,), {"segments": np.asarray(segments), "num_segments": int(num_segments)}
    )


def dropout(a, rate: float, training: bool, rng: np.random.Generator | None = None):
    if not training or rate == 0.0:
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
        return a
    return apply_primitive("dropout", (a,), {"rate": rate, "training": training, "rng": rng})


# ---------------------------------------------------------------------------
# reverse sweep

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.id not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor, retain_graph: bool = False) -> dict[int, np.ndarray]:
    """Propagate d(root)/d(node) to every reachable node that requires grad.

    Returns a map from node id to gradient. Leaf tensors also accumulate the
    result into ``.grad``. The graph is released unless ``retain_graph``.
    """
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    if root._op is not None and root._vjp is None:
        raise UsageError("this graph was already released by an earlier backward pass")
    order = _topological(root)
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=np.float64)
    for node in order:
        if node._op is None:
            g = grads.get(node.id)
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
        elif not retain_graph:
            node._parents = ()
            node._vjp = None
    return grads


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Iterable[int] | None = None) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else tuple(shape)
    return parameter(rng.uniform(-bound, bound, size=shape))
