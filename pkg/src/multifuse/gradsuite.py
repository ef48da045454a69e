"""Finite-difference checks over every differentiable block at small, fixed-seed shapes."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from multifuse.detector import (
    BoundingBox,
    Decoder,
    DecoderConfig,
    DenseOutput,
    iou_loss,
    rasterize_gt,
    score_map_loss,
    total_loss,
)
from multifuse.encoder import DeformConvLayer, ResNeXtBlock
from multifuse.mufem import FusionStage, GatLayer, fusion_unit, grid_to_graph
from multifuse.scofa import ChannelAttention, CrfBlock, IrnnBlock
from multifuse.tensor import Tensor, grad_errors, ops

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4


@dataclass
class Block:
    name: str
    build: Callable[[np.random.Generator], tuple]  # -> (fn, inputs)
    tol: float = NONLINEAR_TOL
    probes: Optional[int] = 24


@dataclass
class Row:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale)


def _project(out: Tensor, seed: int = 1) -> Tensor:
    """Scalar read-out with fixed random weights, so symmetric errors can't cancel."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * w).sum()


def _module_block(module, *inputs, fn=None):
    params = module.parameters()
    n = len(inputs)
    call = fn or (lambda *xs: module(*xs))

    def f(*args):
        return _project(call(*args[:n]))

    return f, list(inputs) + params


def _conv(rng):
    x, w, b = _t(rng, 1, 4, 6, 6), _t(rng, 6, 2, 3, 3), _t(rng, 6)
    return (lambda x, w, b: _project(ops.conv2d(x, w, b, stride=1, pad=1, groups=2))), [x, w, b]


def _matmul(rng):
    a, b = _t(rng, 5, 7), _t(rng, 7, 3)
    return (lambda a, b: _project(a @ b)), [a, b]


def _upsample(rng):
    x = _t(rng, 1, 3, 4, 5)
    return (lambda x: _project(ops.upsample2x_bilinear(x))), [x]


def _deform(rng):
    layer = DeformConvLayer(4, 4, 3, rng, groups=2)
    x = _t(rng, 1, 4, 6, 6)
    off = Tensor(rng.uniform(-1.5, 1.5, (1, 18, 6, 6)) + 0.137)  # keep taps off integer grid points
    return (lambda x, off, w, b: _project(ops.deform_conv2d(x, off, w, b, 1, 1, 2))), [x, off, layer.weight, layer.bias]


def _group_norm(rng):
    x = _t(rng, 1, 8, 4, 4)
    return (lambda x: _project(ops.group_norm(x, 4))), [x]


def _resnext(rng):
    block = ResNeXtBlock(4, 8, 2, 4, True, rng, norm_groups=4)
    block.grouped.offset_predictor.weight.data = rng.standard_normal(block.grouped.offset_predictor.weight.shape) * 0.1
    return _module_block(block, _t(rng, 1, 4, 8, 8))


def _gat(rng):
    layer = GatLayer(6, 6, rng)
    fmap = _t(rng, 1, 6, 4, 4)
    return _module_block(layer, fmap, fn=lambda x: layer(grid_to_graph(x, 2)).h)


def _fusion_unit(rng):
    f, g = _t(rng, 1, 4, 3, 3), _t(rng, 1, 4, 3, 3)
    return (lambda f, g: _project(ops.concat(list(fusion_unit(f, g)), axis=1))), [f, g]


def _fusion_stage(rng):
    stage = FusionStage(4, 2, rng)
    fv, ft = _t(rng, 1, 4, 4, 4), _t(rng, 1, 4, 4, 4)
    return _module_block(stage, fv, ft, fn=lambda a, b: ops.concat(list(stage(a, b)), axis=1))


def _crf(rng):
    block = CrfBlock(4, rng, iterations=3, damping=0.5)
    return _module_block(block, _t(rng, 1, 4, 5, 5))


def _channel_attention(rng):
    att = ChannelAttention(6, rng)
    att.conv.weight.data = rng.standard_normal(att.conv.weight.shape)
    return _module_block(att, _t(rng, 1, 6, 4, 4))


def _irnn(rng):
    block = IrnnBlock(4, 3, rng)
    return _module_block(block, _t(rng, 1, 4, 4, 5))


def _decoder(rng):
    dec = Decoder(8, DecoderConfig(chain=(8, 8, 4), norm_groups=2, geometry_scale=4.0), rng)
    fused = _t(rng, 1, 8, 2, 2)

    def fn(x):
        out = dec(x, feature_stride=8)
        return ops.concat([out.score, out.geometry * 0.1], axis=1)

    return _module_block(dec, fused, fn=fn)


def _score_loss(rng):
    s_p = Tensor(rng.uniform(0.05, 0.95, (1, 1, 6, 6)))
    s_gt = (rng.random((1, 1, 6, 6)) < 0.3).astype(np.float64)
    return (lambda s: score_map_loss(s, s_gt)), [s_p]


def _iou_loss(rng):
    gt = np.array([10.0, 12.0, 30.0, 50.0])
    pred = Tensor(gt + rng.uniform(-4, 4, 4))
    return (lambda p: iou_loss(p, gt)), [pred]


def _total_loss(rng):
    target = rasterize_gt([BoundingBox(4.0, 2.0, 14.0, 26.0)], (16, 8), 2)
    score = Tensor(rng.uniform(0.1, 0.9, (1, 1, 16, 8)))
    cy, cx = np.mgrid[0:16, 0:8] * 2.0 + 1.0
    base = np.stack([4.0 - cx, 2.0 - cy, 14.0 - cx, 26.0 - cy])[None]
    geometry = Tensor(base + rng.uniform(-1.5, 1.5, base.shape))

    def fn(s, g):
        return total_loss(DenseOutput(score=s, geometry=g, stride=2), target, 0.7).total

    return fn, [score, geometry]


BLOCKS: List[Block] = [
    Block("conv2d", _conv, LINEAR_TOL, None),
    Block("matmul", _matmul, LINEAR_TOL, None),
    Block("upsample2x_bilinear", _upsample, LINEAR_TOL, None),
    Block("deform_conv2d", _deform),
    Block("group_norm", _group_norm),
    Block("resnext_block", _resnext),
    Block("gat_stage", _gat),
    Block("fusion_unit", _fusion_unit),
    Block("fusion_stage", _fusion_stage),
    Block("crf_block", _crf),
    Block("channel_attention", _channel_attention),
    Block("irnn_sweep", _irnn),
    Block("decoder", _decoder),
    Block("score_map_loss", _score_loss),
    Block("iou_loss", _iou_loss),
    Block("total_loss", _total_loss),
]


def run_block(block: Block, seed: int = 0) -> Row:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    try:
        fn, inputs = block.build(rng)
        err = max(grad_errors(fn, inputs, probes=block.probes, seed=seed))
    except Exception:  # a crash counts as a failed row
        err = float("nan")
    return Row(block.name, err, block.tol, time.perf_counter() - t0)


def run_suite(blocks: Optional[Sequence[Block]] = None, seed: int = 0) -> List[Row]:
    return [run_block(b, seed) for b in (BLOCKS if blocks is None else blocks)]


def format_table(rows: Sequence[Row]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'block':<{width}}  max_rel_err  tol      result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.error:11.3e}  {r.tol:.0e}    {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
