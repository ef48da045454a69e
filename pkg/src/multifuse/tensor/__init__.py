from multifuse.tensor import ops
from multifuse.tensor.gradcheck import grad_check, grad_errors
from multifuse.tensor.optim import OptimState, lr_schedule, sgd_momentum_step
from multifuse.tensor.tensor import Tape, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Tape",
    "Tensor",
    "OptimState",
    "backward",
    "grad_check",
    "grad_errors",
    "is_grad_enabled",
    "lr_schedule",
    "no_grad",
    "ops",
    "sgd_momentum_step",
]
