import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spa.autodiff import (
    F,
    PRIMITIVES,
    OptimizerState,
    PlateauScheduler,
    Tensor,
    adam_step,
    apply_primitive,
    backward,
    clip_gradients,
    grad_check,
    no_grad,
    parameter,
)
from spa.errors import ConfigurationError, GatherIndexError, NumericalError, ShapeError, UsageError


def test_softmax_of_zeros_is_uniform():
    out = F.softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3)


def test_matmul_selects_rows():
    a = Tensor([[1.0, 0, 0], [0, 1, 0]])
    x = Tensor([[5.0], [7.0], [9.0]])
    assert (a @ x).data.ravel().tolist() == [5.0, 7.0]


def test_scatter_add_accumulates():
    out = F.scatter_add(Tensor([[1.0], [2.0], [3.0]]), np.array([0, 0, 1]), 2)
    assert out.data.tolist() == [[3.0], [3.0]]


def test_unknown_primitive_raises():
    with pytest.raises(ConfigurationError):
        apply_primitive("no_such_op", (Tensor(1.0),))


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        F.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_gather_out_of_range():
    with pytest.raises(GatherIndexError):
        F.gather(Tensor(np.zeros((3, 2))), np.array([0, 3]))


def test_square_gradient():
    x = parameter(3.0)
    grads = backward(x * x)
    assert grads[x.id] == 6.0
    assert x.grad == 6.0


def test_sigmoid_gradient_at_zero():
    x = parameter([0.0])
    backward(F.sum(F.sigmoid(x)))
    assert x.grad.tolist() == [0.25]


def test_reused_node_accumulates():
    x = parameter([1.0, 2.0])
    backward(F.sum(x) + F.sum(x))
    assert x.grad.tolist() == [2.0, 2.0]


def test_backward_needs_scalar():
    x = parameter([1.0, 2.0])
    with pytest.raises(UsageError):
        backward(x * x)


def test_graph_freed_after_backward():
    x = parameter([1.0, 2.0])
    y = F.sum(F.tanh(x))
    backward(y)
    with pytest.raises(UsageError):
        backward(y)


def test_no_grad_records_nothing():
    x = parameter([1.0])
    with no_grad():
        y = F.sum(x * x)
    assert not y.requires_grad


def test_relu_has_no_negative_zero():
    out = F.relu(Tensor([-1.0, -0.0, 2.0]))
    assert not np.signbit(out.data).any()


def test_grad_check_tanh():
    x = np.random.default_rng(0).normal(size=4)
    assert grad_check(lambda t: F.sum(F.tanh(t)), x) < 1e-6


def test_grad_check_linear_is_exact():
    x = np.random.default_rng(1).normal(size=5)
    assert grad_check(lambda t: F.sum(t), x) == 0.0


def test_grad_check_softmax_dot():
    x = np.random.default_rng(2).normal(size=3)
    assert grad_check(lambda t: F.sum(F.softmax(t) * t), x) < 1e-5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_nan():
    with pytest.raises(NumericalError):
        grad_check(lambda t: F.sum(F.log(t)), np.array([-1.0]))


# each entry builds a scalar from one random input; only primitives with a nonlinear adjoint
NONLINEAR = {
    "mul": lambda x: F.sum(x * x),
    "div": lambda x: F.sum(Tensor([1.0, 2.0, 3.0, 4.0]) / (x * x + 1.0)),
    "sigmoid": lambda x: F.sum(F.sigmoid(x) * x),
    "tanh": lambda x: F.sum(F.tanh(x) * x),
    "relu": lambda x: F.sum(F.relu(x) * x),
    "leaky_relu": lambda x: F.sum(F.leaky_relu(x, 0.2) * x),
    "exp": lambda x: F.sum(F.exp(x)),
    "log": lambda x: F.sum(F.log(x * x + 1.0)),
    "softmax": lambda x: F.sum(F.softmax(x) * x),
    "log_softmax": lambda x: F.sum(F.log_softmax(x) * x),
    "max": lambda x: F.sum(F.max(F.reshape(x * x, (2, 2)), axis=0)),
    "matmul": lambda x: F.sum(F.reshape(x, (2, 2)) @ F.reshape(x, (2, 2))),
    "segment_softmax": lambda x: F.sum(
        F.segment_softmax(F.reshape(x, (4, 1)), np.array([0, 0, 1, 1]), 2) * F.reshape(x, (4, 1))),
}


@pytest.mark.parametrize("name", sorted(NONLINEAR))
def test_nonlinear_primitives_pass_grad_check(name):
    fn = NONLINEAR[name]
    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=4)
        # keep relu-style kinks and max ties away from the finite-difference stencil
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
        assert grad_check(fn, x, eps=1e-5) < 1e-4, (name, seed)


def test_every_registered_primitive_has_a_vjp():
    for name in ("add", "sub", "mul", "div", "matmul", "gather", "scatter_add", "segment_softmax", "dropout"):
        assert name in PRIMITIVES


@given(
    arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
    arrays(np.float64, (4,), elements=st.floats(-5, 5)),
)
@settings(max_examples=30, deadline=None)
def test_broadcast_add_gradient_sums_over_broadcast_axes(a, b):
    ta, tb = parameter(a), parameter(b)
    backward(F.sum(ta + tb))
    assert np.array_equal(ta.grad, np.ones_like(a))
    assert np.array_equal(tb.grad, np.full(4, 3.0))


def test_dropout_is_identity_in_eval():
    x = Tensor(np.ones(10))
    assert F.dropout(x, 0.5, False, None) is x


def test_dropout_scales_kept_units():
    rng = np.random.default_rng(0)
    out = F.dropout(Tensor(np.ones(1000)), 0.5, True, rng).data
    assert set(np.unique(out)) <= {0.0, 2.0}


# -- optimiser --------------------------------------------------------------

def test_adam_zero_grad_is_fixed_point():
    p = {"w": parameter([1.0, -2.0])}
    state = OptimizerState(learning_rate=0.1)
    adam_step(p, {"w": np.zeros(2)}, state)
    assert p["w"].data.tolist() == [1.0, -2.0]
    assert state.step_count == 1


def test_adam_first_step_moves_by_lr():
    p = {"w": parameter([1.0])}
    adam_step(p, {"w": np.array([1.0])}, OptimizerState(learning_rate=0.1))
    assert math.isclose(p["w"].data[0], 0.9, rel_tol=1e-6)


def test_adam_symmetric_params():
    p = {"a": parameter([0.3]), "b": parameter([0.3])}
    state = OptimizerState(learning_rate=0.01)
    for g in (0.5, -0.2, 0.9):
        adam_step(p, {"a": np.array([g]), "b": np.array([g])}, state)
    assert p["a"].data[0] == p["b"].data[0]


def test_adam_leaves_absent_params_untouched():
    p = {"a": parameter([0.3]), "b": parameter([0.7])}
    state = OptimizerState(learning_rate=0.01, weight_decay=0.1)
    adam_step(p, {"a": np.array([1.0])}, state)
    assert p["b"].data[0] == 0.7


def test_adam_rejects_non_finite_before_touching_params():
    p = {"a": parameter([0.3]), "b": parameter([0.7])}
    with pytest.raises(NumericalError):
        adam_step(p, {"a": np.array([1.0]), "b": np.array([np.nan])}, OptimizerState())
    assert p["a"].data[0] == 0.3


def test_clip_below_threshold_unchanged():
    g = {"a": np.array([0.3, 0.4])}
    out, norm = clip_gradients(g, 1.0)
    assert math.isclose(norm, 0.5) and out["a"].tolist() == [0.3, 0.4]


def test_clip_scales_to_max_norm():
    out, norm = clip_gradients({"a": np.array([3.0, 4.0])}, 1.0)
    assert norm == 5.0
    assert np.allclose(out["a"], [0.6, 0.8])


def test_clip_zero():
    out, norm = clip_gradients({"a": np.zeros(3)}, 1.0)
    assert norm == 0.0 and not out["a"].any()


def test_plateau_improvement_keeps_lr():
    s = PlateauScheduler(learning_rate=0.1, patience=2, mode="maximize")
    for m in (0.5, 0.6):
        s.step(m)
    assert s.learning_rate == 0.1


def test_plateau_reduces_after_patience():
    s = PlateauScheduler(learning_rate=0.1, factor=0.5, patience=2, mode="maximize")
    lrs = [s.step(0.5) for _ in range(3)]
    assert lrs == [0.1, 0.1, 0.05]


def test_plateau_floor():
    s = PlateauScheduler(learning_rate=0.01, factor=0.5, patience=1, mode="maximize", min_learning_rate=0.01)
    s.step(0.5)
    s.step(0.4)
    assert s.learning_rate == 0.01


def test_plateau_rejects_nan():
    with pytest.raises(NumericalError):
        PlateauScheduler(learning_rate=0.1).step(float("nan"))
