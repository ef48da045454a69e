"""Dense tensor with tape-based reverse-mode differentiation.

A tensor produced by a primitive op remembers its parents and a closure
mapping the output gradient to one gradient per parent. ``backward`` records
the reachable graph into a :class:`Tape` (topological order) and walks it in
reverse, accumulating gradients additively across fan-out.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from multifuse.errors import DisconnectedError, NumericError, ShapeError

logger = logging.getLogger(__name__)

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if dtype is not None:
            return data.astype(dtype, copy=False)
        if np.issubdtype(data.dtype, np.floating):
            return data
        return data.astype(np.float32)
    return np.asarray(data, dtype=dtype or np.float32)


class Tensor:
    """Row-major float array (float32 by default) plus optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.op: Optional[str] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap the output of a primitive and attach it to the graph when needed."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    else:
        out._parents = ()
        out._backward = None
        out.op = op
    return out


class Tape:
    """Executed primitive ops reachable from a root, in topological order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, tensor: Tensor) -> bool:
        return any(n is tensor for n in self.nodes)


def backward(
    loss: Tensor,
    tape: Optional[Tape] = None,
    params: Optional[Iterable[Tensor]] = None,
    strict: bool = False,
) -> list:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``params`` that the loss does not reach get a zero gradient and are
    returned (and logged); with ``strict=True`` a DisconnectedError is raised.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DisconnectedError("loss does not depend on any tensor that requires grad")
    if tape is None:
        tape = Tape.record(loss)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = g.astype(node.data.dtype, copy=False)
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    disconnected = []
    if params is not None:
        reached = {id(n) for n in tape.nodes}
        for p in params:
            if id(p) not in reached:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                disconnected.append(p)
        if disconnected:
            names = ", ".join(p.name or repr(p) for p in disconnected)
            if strict:
                raise DisconnectedError(f"loss not reachable from: {names}")
            logger.debug("loss not reachable from %d parameter(s): %s", len(disconnected), names)
    return disconnected
