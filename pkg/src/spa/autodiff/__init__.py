from spa.autodiff import tensor as F
from spa.autodiff.gradcheck import grad_check, numeric_gradient
from spa.autodiff.optim import OptimizerState, PlateauScheduler, adam_step, clip_gradients, plateau_step
from spa.autodiff.tensor import PRIMITIVES, Tensor, apply_primitive, backward, no_grad, parameter

__all__ = [
    "F",
    "PRIMITIVES",
    "OptimizerState",
    "PlateauScheduler",
    "Tensor",
    "adam_step",
    "apply_primitive",
    "backward",
    "clip_gradients",
    "grad_check",
    "no_grad",
    "numeric_gradient",
    "parameter",
    "plateau_step",
]
