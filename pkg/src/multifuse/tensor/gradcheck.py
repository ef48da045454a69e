"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from multifuse.tensor.tensor import Tensor, backward, no_grad


def _as_float64(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.data = t.data.astype(np.float64)
        t.grad = None


def grad_errors(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    probes: Optional[int] = None,
    seed: int = 0,
) -> list:
    """Per-input relative error between tape and central-difference gradients.

    ``fn(*inputs)`` must return a scalar. Inputs are promoted to float64 in
    place. With ``probes`` set, only that many randomly chosen coordinates
    per input are differenced. The error for one input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``.
    """
    _as_float64(inputs)
    for t in inputs:
        t.requires_grad = True
    out = fn(*inputs)
    backward(out)
    rng = np.random.default_rng(seed)
    errors = []
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        if probes is None or probes >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=probes, replace=False)
        a = analytic.reshape(-1)[idx]
        n = np.empty(len(idx))
        with no_grad():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                up = fn(*inputs).item()
                flat[i] = orig - eps
                down = fn(*inputs).item()
                flat[i] = orig
                n[k] = (up - down) / (2 * eps)
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
        errors.append(float(np.abs(a - n).max(initial=0.0) / scale))
    return errors


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    probes: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Maximum relative gradient error over all inputs (see :func:`grad_errors`)."""
    return max(grad_errors(fn, inputs, eps=eps, probes=probes, seed=seed))
