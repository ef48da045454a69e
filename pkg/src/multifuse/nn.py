"""Parameter containers and the two convolution layers the model is built from."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from multifuse.errors import ShapeError
from multifuse.tensor import Tensor, ops


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


class Module:
    """Walks attributes in definition order to find parameters and children."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def name_parameters(self) -> None:
        """Stamp canonical names onto the parameter tensors (used in error messages)."""
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != tuple(arr.shape):
                raise ShapeError(f"{name}: checkpoint shape {tuple(arr.shape)} != {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        pad: Optional[int] = None,
        groups: int = 1,
        bias: bool = True,
        init: str = "he",
    ):
        if c_in % groups or c_out % groups:
            raise ShapeError(f"conv channels {c_in}->{c_out} not divisible by groups={groups}")
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.groups = groups
        shape = (c_out, c_in // groups, k, k)
        fan_in = (c_in // groups) * k * k
        w = he_normal(rng, shape, fan_in) if init == "he" else np.zeros(shape, np.float32)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


class GroupNorm(Module):
    """Per-sample group normalisation with a learned per-channel scale and shift."""

    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        if groups < 1 or channels % groups:
            raise ShapeError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones((1, channels, 1, 1)))
        self.beta = Parameter(np.zeros((1, channels, 1, 1)))

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.eps) * self.gamma + self.beta


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


def norm_layer(channels: int, groups: int) -> Module:
    """GroupNorm, or a pass-through when ``groups`` is 0."""
    return GroupNorm(channels, groups) if groups else Identity()
