"""Unimodal feature encoders: grouped residual blocks with deformable convolution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from multifuse.errors import ConfigError
from multifuse.nn import Conv2d, Module, Parameter, he_normal, norm_layer
from multifuse.tensor import Tensor, ops


@dataclass
class EncoderConfig:
    in_channels: int = 3
    widths: tuple = (16, 32, 64)
    blocks: tuple = (1, 1, 1)
    strides: tuple = (2, 2, 2)
    cardinality: int = 4
    deformable: bool = True
    deformable_stages: tuple = (2,)
    norm_groups: int = 4  # 0 disables normalisation

    def validate(self) -> None:
        n = len(self.widths)
        if n == 0:
            raise ConfigError("encoder.widths must name at least one stage")
        if len(self.blocks) != n or len(self.strides) != n:
            raise ConfigError("encoder.widths, encoder.blocks and encoder.strides must have equal length")
        if self.cardinality < 1:
            raise ConfigError(f"encoder.cardinality must be >= 1, got {self.cardinality}")
        for w in self.widths:
            if w % self.cardinality:
                raise ConfigError(f"encoder.widths: {w} is not divisible by cardinality {self.cardinality}")
        if self.norm_groups < 0 or (self.norm_groups and any(w % self.norm_groups for w in self.widths)):
            raise ConfigError(f"encoder.norm_groups: {self.norm_groups} does not divide every width")
        if any(b < 1 for b in self.blocks):
            raise ConfigError("encoder.blocks: every stage needs at least one block")
        if any(s < 1 for s in self.strides):
            raise ConfigError("encoder.strides must be >= 1")
        if self.deformable:
            if not self.deformable_stages:
                raise ConfigError("encoder.deformable_stages: at least one stage required in deformable mode")
            if any(not 0 <= s < n for s in self.deformable_stages):
                raise ConfigError(f"encoder.deformable_stages out of range for {n} stages")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


class DeformConvLayer(Module):
    """k x k convolution sampled on a grid displaced by per-tap learned offsets.

    The offset predictor starts at zero, so a fresh layer behaves exactly as
    a plain convolution with the same weights.
    """

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: Optional[int] = None, groups: int = 1):
        self.k = k
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.groups = groups
        self.weight = Parameter(he_normal(rng, (c_out, c_in // groups, k, k), (c_in // groups) * k * k))
        self.bias = Parameter(np.zeros(c_out))
        self.offset_predictor = Conv2d(c_in, 2 * k * k, k, rng, stride=stride, pad=self.pad, init="zero")

    @property
    def offset_channels(self) -> int:
        return self.offset_predictor.weight.shape[0]

    def offsets(self, x: Tensor) -> Tensor:
        return self.offset_predictor(x)

    def forward(self, x: Tensor, offset: Optional[Tensor] = None) -> Tensor:
        if offset is None:
            offset = self.offsets(x)
        return ops.deform_conv2d(x, offset, self.weight, self.bias, self.stride, self.pad, self.groups)


def deform_conv2d(x: Tensor, layer: DeformConvLayer) -> Tensor:
    return layer(x)


class ResNeXtBlock(Module):
    """1x1 reduce, grouped 3x3 (optionally deformable), 1x1 expand, residual add; each conv normalised."""

    def __init__(self, c_in: int, c_out: int, stride: int, cardinality: int,
                 deformable: bool, rng: np.random.Generator, norm_groups: int = 4):
        self.reduce = Conv2d(c_in, c_out, 1, rng)
        self.norm_reduce = norm_layer(c_out, norm_groups)
        if deformable:
            self.grouped = DeformConvLayer(c_out, c_out, 3, rng, stride=stride, groups=cardinality)
        else:
            self.grouped = Conv2d(c_out, c_out, 3, rng, stride=stride, groups=cardinality)
        self.norm_grouped = norm_layer(c_out, norm_groups)
        self.expand = Conv2d(c_out, c_out, 1, rng)
        self.norm_expand = norm_layer(c_out, norm_groups)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Conv2d(c_in, c_out, 1, rng, stride=stride)
            self.norm_shortcut = norm_layer(c_out, norm_groups)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.norm_reduce(self.reduce(x)))
        y = ops.relu(self.norm_grouped(self.grouped(y)))
        y = self.norm_expand(self.expand(y))
        skip = x if self.shortcut is None else self.norm_shortcut(self.shortcut(x))
        return ops.relu(y + skip)


class Encoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.stem = Conv2d(config.in_channels, config.widths[0], 3, rng)
        self.norm_stem = norm_layer(config.widths[0], config.norm_groups)
        blocks = []
        c_in = config.widths[0]
        for stage, (width, n_blocks, stride) in enumerate(zip(config.widths, config.blocks, config.strides)):
            deform = config.deformable and stage in config.deformable_stages
            for b in range(n_blocks):
                blocks.append(ResNeXtBlock(c_in, width, stride if b == 0 else 1, config.cardinality, deform, rng,
                                           config.norm_groups))
                c_in = width
        self.blocks = blocks

    def forward(self, image: Tensor) -> Tensor:
        H, W = image.shape[2:]
        s = self.config.total_stride
        if H % s or W % s:
            raise ConfigError(f"input {H}x{W} is not divisible by the encoder stride {s}")
        x = ops.relu(self.norm_stem(self.stem(image)))
        for block in self.blocks:
            x = block(x)
        return x


def encode(image: Tensor, encoder: Encoder) -> Tensor:
    return encoder(image)
