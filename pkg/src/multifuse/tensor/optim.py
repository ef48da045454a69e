"""Momentum SGD with step-wise learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from multifuse.errors import ShapeError
from multifuse.tensor.tensor import Tensor


def lr_schedule(step: int, base_lr: float, period: int = 5000) -> float:
    """Divide the base rate by 10 after every ``period`` steps."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return base_lr / 10 ** (step // period)


@dataclass
class OptimState:
    base_lr: float = 0.01
    momentum: float = 0.9
    period: int = 5000
    step: int = 0
    velocity: list = field(default_factory=list)

    @property
    def lr(self) -> float:
        return lr_schedule(self.step, self.base_lr, self.period)


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Optional[Sequence[Optional[np.ndarray]]],
    state: OptimState,
) -> None:
    """In-place update ``v = mu*v + g; p = p - lr*v``.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient is
    treated as zero.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ShapeError(f"{len(params)} params but {len(grads)} gradients")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise ShapeError("optimizer state was built for a different parameter list")
    lr = state.lr
    for p, g, v in zip(params, grads, state.velocity):
        if v.shape != p.shape:
            raise ShapeError(f"velocity shape {v.shape} != parameter shape {p.shape}")
        if g is None:
            g = 0.0
        elif g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v *= state.momentum
        v += g
        p.data -= (lr * v).astype(p.data.dtype, copy=False)
    state.step += 1
