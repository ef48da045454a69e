"""Spatio-contextual aggregation: CRF refinement, channel attention, four-direction IRNN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from multifuse.errors import ConfigError
from multifuse.nn import Conv2d, Module, Parameter
from multifuse.tensor import Tensor, ops

DIRECTIONS = ("left_to_right", "right_to_left", "top_to_bottom", "bottom_to_top")


@dataclass
class ScofaConfig:
    spatial: bool = True
    contextual: bool = True
    crf_iterations: int = 3
    crf_damping: float = 0.5
    irnn_channels: int = 32

    def validate(self) -> None:
        if not (self.spatial or self.contextual):
            raise ConfigError("scofa: at least one of the spatial/contextual branches must be enabled")
        if self.crf_iterations < 1:
            raise ConfigError(f"scofa.crf_iterations must be >= 1, got {self.crf_iterations}")
        if not 0.0 < self.crf_damping <= 1.0:
            raise ConfigError(f"scofa.crf_damping must lie in (0, 1], got {self.crf_damping}")
        if self.irnn_channels < 1:
            raise ConfigError(f"scofa.irnn_channels must be >= 1, got {self.irnn_channels}")


class CrfBlock(Module):
    """Damped mean-field style refinement.

    F0 = input, F(t+1) = F0 + damping * pairwise(relu(F(t))), K iterations.
    The pairwise term is a bias-free 3x3 convolution, so a zero kernel makes
    the block an exact identity.
    """

    def __init__(self, channels: int, rng: np.random.Generator, iterations: int = 3, damping: float = 0.5):
        if iterations < 1:
            raise ConfigError(f"CRF iterations must be >= 1, got {iterations}")
        self.iterations = iterations
        self.damping = damping
        self.pairwise = Conv2d(channels, channels, 3, rng, bias=False)
        self.pairwise.weight.data *= 0.1

    def forward(self, fmap: Tensor) -> Tensor:
        state = fmap
        for _ in range(self.iterations):
            state = fmap + self.pairwise(ops.relu(state)) * self.damping
        return state


def crf_refine(fmap: Tensor, block: CrfBlock) -> Tensor:
    return block(fmap)


class ChannelAttention(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv2d(channels, channels, 1, rng)
        self.conv.weight.data *= 0.1

    def mask(self, fmap: Tensor) -> Tensor:
        return ops.sigmoid(self.conv(fmap))

    def forward(self, fmap: Tensor) -> Tensor:
        return fmap * self.mask(fmap)


def channel_attention(fmap: Tensor, att: ChannelAttention) -> Tensor:
    return att(fmap)


class DirectionalRNN(Module):
    """h_t = relu(V x_t + U h_(t-1) + b) along one axis, U initialised to identity."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.U = Parameter(np.eye(channels))
        self.V = Parameter(rng.standard_normal((channels, channels)) * np.sqrt(1.0 / channels))
        self.b = Parameter(np.zeros(channels))

    def sweep(self, x: Tensor, direction: str) -> Tensor:
        """x is [C, H, W]; returns the hidden-state map of the same shape."""
        C, H, W = x.shape
        horizontal = direction in ("left_to_right", "right_to_left")
        steps = W if horizontal else H
        order = range(steps)
        if direction in ("right_to_left", "bottom_to_top"):
            order = reversed(range(steps))
        # sequences become rows of a [C, batch] matrix per step
        seq = x.transpose(2, 0, 1) if horizontal else x.transpose(1, 0, 2)  # [steps, C, batch]
        b = ops.reshape(self.b, (C, 1))
        h = None
        states = [None] * steps
        for t in order:
            pre = self.V @ seq[t] + b
            if h is not None:
                pre = pre + self.U @ h
            h = ops.relu(pre)
            states[t] = h
        out = ops.stack(states, axis=0)  # [steps, C, batch]
        return out.transpose(1, 2, 0) if horizontal else out.transpose(1, 0, 2)


class IrnnBlock(Module):
    def __init__(self, c_in: int, c_irnn: int, rng: np.random.Generator):
        self.c_irnn = c_irnn
        self.project = Conv2d(c_in, c_irnn, 1, rng)
        self.rnns = [DirectionalRNN(c_irnn, rng) for _ in DIRECTIONS]

    @property
    def out_channels(self) -> int:
        return 4 * self.c_irnn

    def forward(self, fmap: Tensor) -> Tensor:
        x = self.project(fmap)[0]  # [C, H, W]
        maps = [rnn.sweep(x, d) for rnn, d in zip(self.rnns, DIRECTIONS)]
        return ops.reshape(ops.concat(maps, axis=0), (1, self.out_channels) + x.shape[1:])


def irnn_sweep(fmap: Tensor, block: IrnnBlock) -> Tensor:
    return block(fmap)


class Scofa(Module):
    def __init__(self, channels: int, config: ScofaConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.crf_visible = CrfBlock(channels, rng, config.crf_iterations, config.crf_damping)
        self.crf_thermal = CrfBlock(channels, rng, config.crf_iterations, config.crf_damping)
        concat = 2 * channels
        self.attention = ChannelAttention(concat, rng) if config.spatial else None
        self.irnn = IrnnBlock(concat, config.irnn_channels, rng) if config.contextual else None
        self.out_channels = (concat if config.spatial else 0) + (4 * config.irnn_channels if config.contextual else 0)

    def forward(self, fv: Tensor, ft: Tensor) -> Tensor:
        refined = ops.concat([self.crf_visible(fv), self.crf_thermal(ft)], axis=1)
        branches = []
        if self.attention is not None:
            branches.append(self.attention(refined))
        if self.irnn is not None:
            branches.append(self.irnn(refined))
        return branches[0] if len(branches) == 1 else ops.concat(branches, axis=1)


def scofa_forward(fv: Tensor, ft: Tensor, scofa: Scofa) -> Tensor:
    return scofa(fv, ft)
