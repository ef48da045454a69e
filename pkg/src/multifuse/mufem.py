"""Multimodal feature embedding: per-stream grid graph attention plus fusion units."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from multifuse.errors import ConfigError, NumericError, ShapeError
from multifuse.nn import Module, Parameter
from multifuse.tensor import Tensor, ops

LEAKY_SLOPE = 0.2


@dataclass
class GridGraph:
    """Complete graph whose nodes are non-overlapping P x P patches of a feature map."""

    h: Tensor  # [N_nodes, F]
    patch: int
    grid: tuple  # (rows, cols) of the node layout

    @property
    def n_nodes(self) -> int:
        return self.h.shape[0]

    def adjacency(self) -> np.ndarray:
        return np.ones((self.n_nodes, self.n_nodes), dtype=bool)


def grid_to_graph(fmap: Tensor, patch: int) -> GridGraph:
    """Max-pool each patch into one node feature vector (F = C)."""
    if fmap.ndim != 4 or fmap.shape[0] != 1:
        raise ShapeError(f"grid_to_graph expects [1,C,H,W], got {fmap.shape}")
    _, C, H, W = fmap.shape
    if patch < 1 or H % patch or W % patch:
        raise ConfigError(f"feature map {H}x{W} is not divisible by patch size {patch}")
    pooled = ops.max_pool2d(fmap, patch)  # [1, C, H/P, W/P]
    rows, cols = H // patch, W // patch
    h = ops.reshape(pooled, (C, rows * cols)).transpose(1, 0)
    return GridGraph(h=h, patch=patch, grid=(rows, cols))


class GatLayer(Module):
    """Single-head graph attention: e_ij = LeakyReLU(a . [W h_i || W h_j])."""

    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator):
        self.W = Parameter(rng.standard_normal((f_in, f_out)) * np.sqrt(1.0 / f_in))
        self.a = Parameter(rng.standard_normal(2 * f_out) * np.sqrt(1.0 / f_out))
        self.f_out = f_out

    def attention(self, graph: GridGraph) -> tuple:
        """Return (Wh, alpha) with alpha[i, j] the weight node i puts on node j."""
        wh = graph.h @ self.W  # [N, F']
        a_src = ops.reshape(self.a[: self.f_out], (self.f_out, 1))
        a_dst = ops.reshape(self.a[self.f_out :], (self.f_out, 1))
        e = (wh @ a_src) + ops.reshape(wh @ a_dst, (1, graph.n_nodes))  # [N, 1] + [1, N]
        alpha = ops.softmax(ops.leaky_relu(e, LEAKY_SLOPE), axis=1)
        if not np.all(np.isfinite(alpha.data)):
            raise NumericError("non-finite attention coefficients")
        return wh, alpha

    def forward(self, graph: GridGraph) -> GridGraph:
        if graph.n_nodes == 0:
            raise ShapeError("graph attention on an empty graph")
        wh, alpha = self.attention(graph)
        return GridGraph(h=ops.tanh(alpha @ wh), patch=graph.patch, grid=graph.grid)


def gat_forward(graph: GridGraph, layer: GatLayer) -> GridGraph:
    return layer(graph)


def graph_to_grid(graph: GridGraph, original: Tensor) -> Tensor:
    """Broadcast each node vector over its patch and add it to the original map."""
    _, C, H, W = original.shape
    rows, cols = graph.grid
    P = graph.patch
    if graph.h.shape != (rows * cols, C) or rows * P != H or cols * P != W:
        raise ShapeError(
            f"graph with {graph.h.shape} features on a {rows}x{cols} grid (patch {P}) "
            f"does not match map {original.shape}"
        )
    nodes = ops.reshape(graph.h.transpose(1, 0), (1, C, rows, 1, cols, 1))
    spread = nodes * np.ones((1, 1, 1, P, 1, P), dtype=original.dtype)
    return original + ops.reshape(spread, (1, C, H, W))


def fusion_weights(f: Tensor, g: Tensor) -> Tensor:
    """w = tanh(GAP(f - g)), one weight per channel."""
    if f.shape != g.shape:
        raise ShapeError(f"fusion unit inputs differ in shape: {f.shape} vs {g.shape}")
    return ops.tanh(ops.global_avg_pool(f - g))


def fusion_unit(f: Tensor, g: Tensor) -> tuple:
    w = fusion_weights(f, g)
    w4 = ops.reshape(w, w.shape + (1, 1))
    return f * w4, g * w4


class FusionStage(Module):
    """Two independent GAT blocks (one per stream) feeding one fusion unit."""

    def __init__(self, channels: int, patch: int, rng: np.random.Generator):
        self.patch = patch
        self.gat_visible = GatLayer(channels, channels, rng)
        self.gat_thermal = GatLayer(channels, channels, rng)

    def forward(self, fv: Tensor, ft: Tensor) -> tuple:
        fv = graph_to_grid(self.gat_visible(grid_to_graph(fv, self.patch)), fv)
        ft = graph_to_grid(self.gat_thermal(grid_to_graph(ft, self.patch)), ft)
        return fusion_unit(fv, ft)


class MuFEm(Module):
    def __init__(self, channels: int, n_units: int, patch: int, rng: np.random.Generator):
        if n_units < 1:
            raise ConfigError(f"n_fusion_units must be >= 1, got {n_units}")
        self.units = [FusionStage(channels, patch, rng) for _ in range(n_units)]

    def forward(self, fv: Tensor, ft: Tensor) -> tuple:
        if fv.shape != ft.shape:
            raise ShapeError(f"stream shapes differ: {fv.shape} vs {ft.shape}")
        for unit in self.units:
            fv, ft = unit(fv, ft)
        return fv, ft


def mufem_forward(fv: Tensor, ft: Tensor, mufem: MuFEm) -> tuple:
    return mufem(fv, ft)
