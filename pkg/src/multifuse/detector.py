"""Single-stage dense decoder, its losses, and dense-to-box decoding."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from multifuse.errors import ConfigError, DegenerateBoxError, FormatError, ShapeError
from multifuse.nn import Conv2d, Module, norm_layer
from multifuse.tensor import Tensor, ops

LOG_EPS = 1e-7
IOU_FLOOR = 1e-6
SHRINK = 0.3


@dataclass(frozen=True)
class BoundingBox:
    x_t: float
    y_t: float
    x_b: float
    y_b: float
    occlusion: float = 0.0

    def __post_init__(self):
        if not (self.x_t < self.x_b and self.y_t < self.y_b):
            raise ValueError(f"degenerate box ({self.x_t}, {self.y_t}, {self.x_b}, {self.y_b})")

    @property
    def width(self) -> float:
        return self.x_b - self.x_t

    @property
    def height(self) -> float:
        return self.y_b - self.y_t

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_t, self.y_t, self.x_b, self.y_b], dtype=np.float64)

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_t + dx, self.y_t + dy, self.x_b + dx, self.y_b + dy, self.occlusion)

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.x_t * s, self.y_t * s, self.x_b * s, self.y_b * s, self.occlusion)


@dataclass
class Detection:
    box: BoundingBox
    score: float
    confidence: Optional[float] = None
    pixel: Optional[tuple] = None  # (row, col) in the output grid that produced the box


@dataclass
class DenseOutput:
    """score [1,1,H,W] in (0,1); geometry [1,4,H,W] corner offsets (dx_t, dy_t, dx_b, dy_b) in pixels."""

    score: Tensor
    geometry: Tensor
    stride: int = 2
    weight: Optional[np.ndarray] = None  # [1,1,H,W] geometry-loss weight; targets only

    @property
    def grid(self) -> tuple:
        return self.score.shape[2:]


@dataclass
class LossTerms:
    score: Tensor
    geometry: Tensor
    lambda_g: float
    total: Tensor

    def as_floats(self) -> dict:
        return {"total": self.total.item(), "score": self.score.item(), "geometry": self.geometry.item()}


def pixel_centres(grid: tuple, stride: int) -> tuple:
    """Image-space (x, y) of every output pixel centre, each shaped [H, W]."""
    H, W = grid
    ys = (np.arange(H) + 0.5) * stride
    xs = (np.arange(W) + 0.5) * stride
    return np.meshgrid(xs, ys)


# ---------------------------------------------------------------- decoder


@dataclass
class DecoderConfig:
    chain: tuple = (64, 32, 16)
    geometry_scale: float = 4.0
    norm_groups: int = 4  # 0 disables normalisation

    def validate(self) -> None:
        if self.norm_groups < 0 or (self.norm_groups and any(c % self.norm_groups for c in self.chain)):
            raise ConfigError(f"decoder.norm_groups: {self.norm_groups} does not divide every chain width")
        if len(self.chain) < 1 or any(c < 1 for c in self.chain):
            raise ConfigError(f"decoder.chain must list positive widths, got {self.chain}")
        if self.geometry_scale <= 0:
            raise ConfigError("decoder.geometry_scale must be positive")


class Decoder(Module):
    """1x1 entry conv, then (upsample x2, 3x3 conv) per further chain width, then score/geometry heads."""

    def __init__(self, c_in: int, config: DecoderConfig, rng: np.random.Generator, prior_box: tuple = (6.0, 14.0)):
        config.validate()
        self.config = config
        self.entry = Conv2d(c_in, config.chain[0], 1, rng)
        self.norm_entry = norm_layer(config.chain[0], config.norm_groups)
        self.stages = [Conv2d(a, b, 3, rng) for a, b in zip(config.chain[:-1], config.chain[1:])]
        self.norms = [norm_layer(b, config.norm_groups) for b in config.chain[1:]]
        last = config.chain[-1]
        self.score_head = Conv2d(last, 1, 1, rng)
        self.score_head.weight.data *= 0.1
        self.geometry_head = Conv2d(last, 4, 1, rng)
        self.geometry_head.weight.data *= 0.1
        # start from a plausible half-size box around every pixel
        hw, hh = prior_box
        self.geometry_head.bias.data[:] = np.array([-hw, -hh, hw, hh]) / config.geometry_scale

    @property
    def upsample_factor(self) -> int:
        return 2 ** len(self.stages)

    def forward(self, fused: Tensor, feature_stride: int = 8) -> DenseOutput:
        if feature_stride % self.upsample_factor:
            raise ConfigError(
                f"decoder upsamples x{self.upsample_factor}, incompatible with feature stride {feature_stride}"
            )
        x = ops.relu(self.norm_entry(self.entry(fused)))
        for conv, norm in zip(self.stages, self.norms):
            x = ops.relu(norm(conv(ops.upsample2x_bilinear(x))))
        score = ops.sigmoid(self.score_head(x))
        geometry = self.geometry_head(x) * self.config.geometry_scale
        return DenseOutput(score=score, geometry=geometry, stride=feature_stride // self.upsample_factor)


def decode_features(fused: Tensor, decoder: Decoder, feature_stride: int = 8) -> DenseOutput:
    return decoder(fused, feature_stride)


# ---------------------------------------------------------------- losses


def balance_beta(s_gt: np.ndarray) -> float:
    """Class-balancing weight: one minus the fraction of positive pixels."""
    return float(1.0 - np.mean(s_gt))


def score_map_loss(s_p: Tensor, s_gt, beta: Optional[float] = None) -> Tensor:
    """Class-balanced cross entropy averaged over pixels; logs are clamped at 1e-7."""
    gt = s_gt.data if isinstance(s_gt, Tensor) else np.asarray(s_gt)
    if s_p.shape != gt.shape:
        raise ShapeError(f"score map shapes differ: {s_p.shape} vs {gt.shape}")
    if beta is None:
        beta = balance_beta(gt)
    gt = gt.astype(s_p.dtype)
    pos = ops.log(ops.clamp(s_p, LOG_EPS, None)) * (gt * -beta)
    neg = ops.log(ops.clamp(1.0 - s_p, LOG_EPS, None)) * ((1.0 - gt) * -(1.0 - beta))
    return ops.mean(pos + neg)


def _iou_terms(pred: Tensor, gt: np.ndarray):
    """Per-pixel IoU of predicted vs target corner offsets (both [4, ...] around the same pixel)."""
    px_t, py_t, px_b, py_b = (pred[i] for i in range(4))
    gx_t, gy_t, gx_b, gy_b = gt
    pred_area = ops.relu(px_b - px_t) * ops.relu(py_b - py_t)
    gt_area = np.maximum(gx_b - gx_t, 0) * np.maximum(gy_b - gy_t, 0)
    iw = ops.relu(ops.minimum(px_b, gx_b) - ops.maximum(px_t, gx_t))
    ih = ops.relu(ops.minimum(py_b, gy_b) - ops.maximum(py_t, gy_t))
    inter = iw * ih
    union = pred_area + gt_area - inter
    return inter, union


def iou_loss(pred, gt) -> Tensor:
    """-log IoU with IoU floored at 1e-6. Accepts boxes or [4]-shaped tensors."""
    p = pred if isinstance(pred, Tensor) else Tensor(pred.as_array())
    g = gt.as_array() if isinstance(gt, BoundingBox) else np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    inter, union = _iou_terms(p, g.astype(p.dtype))
    iou = inter / ops.maximum(union, 1e-12)
    return -ops.log(ops.clamp(iou, IOU_FLOOR, None))


def geometry_loss(pred_geometry: Tensor, gt_geometry: np.ndarray, weight: np.ndarray) -> Tensor:
    """Weighted mean of -log IoU over pixels with positive weight."""
    total = float(weight.sum())
    if total <= 0:
        return Tensor(np.zeros((), dtype=pred_geometry.dtype))
    pred = pred_geometry[0]
    gt = gt_geometry[0].astype(pred.dtype)
    w = weight[0, 0].astype(pred.dtype)
    sel = w > 0
    ys, xs = np.nonzero(sel)
    pred_sel = pred[:, ys, xs]  # [4, P]
    inter, union = _iou_terms(pred_sel, gt[:, ys, xs])
    iou = inter / ops.maximum(union, 1e-12)
    per_pixel = -ops.log(ops.clamp(iou, IOU_FLOOR, None))
    return ops.sum(per_pixel * w[ys, xs]) * (1.0 / total)


def total_loss(dense: DenseOutput, target: DenseOutput, lambda_g: float = 1.0) -> LossTerms:
    if lambda_g < 0:
        raise ConfigError(f"lambda_g must be >= 0, got {lambda_g}")
    l_s = score_map_loss(dense.score, target.score)
    weight = target.weight if target.weight is not None else (target.score.data >= 1.0).astype(np.float32)
    l_g = geometry_loss(dense.geometry, target.geometry.data, weight)
    total = l_s if lambda_g == 0 else l_s + l_g * lambda_g
    return LossTerms(score=l_s, geometry=l_g, lambda_g=lambda_g, total=total)


# ---------------------------------------------------------------- ground truth


def rasterize_gt(boxes: Sequence[BoundingBox], grid: tuple, stride: int, strict: bool = False) -> DenseOutput:
    """Dense targets: pixels inside each box shrunk by 0.3 per side are positive.

    Positive pixels carry offsets to the corners of the unshrunk box. Where
    boxes overlap the smaller one wins.
    """
    H, W = grid
    score = np.zeros((1, 1, H, W), dtype=np.float32)
    geometry = np.zeros((1, 4, H, W), dtype=np.float32)
    cx, cy = pixel_centres(grid, stride)
    for box in sorted(boxes, key=lambda b: -b.area):
        sx, sy = SHRINK * box.width, SHRINK * box.height
        inside = (cx >= box.x_t + sx) & (cx <= box.x_b - sx) & (cy >= box.y_t + sy) & (cy <= box.y_b - sy)
        if not inside.any():
            msg = f"box {box} has no positive pixel after shrinking"
            if strict:
                raise DegenerateBoxError(msg)
            warnings.warn(msg, DegenerateBoxError, stacklevel=2)
            continue
        score[0, 0][inside] = 1.0
        geometry[0, 0][inside] = (box.x_t - cx)[inside]
        geometry[0, 1][inside] = (box.y_t - cy)[inside]
        geometry[0, 2][inside] = (box.x_b - cx)[inside]
        geometry[0, 3][inside] = (box.y_b - cy)[inside]
    return DenseOutput(score=Tensor(score), geometry=Tensor(geometry), stride=stride, weight=score.copy())


# ---------------------------------------------------------------- decoding


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N,4] and [M,4] corner arrays."""
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order (stable for ties)."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    iou = box_iou_matrix(boxes[order], boxes[order]) if len(order) else np.zeros((0, 0))
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed |= iou[i] >= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def decode_detections(
    dense: DenseOutput,
    score_thresh: float = 0.5,
    nms_iou: float = 0.5,
    max_candidates: int = 400,
    min_inside: Optional[float] = None,
) -> List[Detection]:
    """Threshold, drop invalid boxes, keep the top candidates, then greedy NMS.

    With ``min_inside`` set, boxes are clipped to the image and those that
    kept less than that fraction of their area are treated as invalid.
    """
    if not (0 < score_thresh < 1 and 0 < nms_iou < 1):
        raise ConfigError(f"thresholds must lie in (0,1), got {score_thresh}, {nms_iou}")
    if min_inside is not None and not 0 <= min_inside <= 1:
        raise ConfigError(f"min_inside must lie in [0, 1], got {min_inside}")
    score = dense.score.data[0, 0]
    geo = dense.geometry.data[0]
    cx, cy = pixel_centres(score.shape, dense.stride)
    ys, xs = np.nonzero(score >= score_thresh)
    if len(ys) == 0:
        return []
    boxes = np.stack(
        [cx[ys, xs] + geo[0, ys, xs], cy[ys, xs] + geo[1, ys, xs], cx[ys, xs] + geo[2, ys, xs], cy[ys, xs] + geo[3, ys, xs]],
        axis=1,
    ).astype(np.float64)
    scores = score[ys, xs].astype(np.float64)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    if min_inside is not None:
        H, W = score.shape[0] * dense.stride, score.shape[1] * dense.stride
        area = np.where(valid, (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]), 1.0)
        boxes = np.clip(boxes, 0.0, [W, H, W, H])
        kept = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        valid &= (kept > 0) & (kept >= min_inside * area)
    boxes, scores, ys, xs = boxes[valid], scores[valid], ys[valid], xs[valid]
    if len(scores) > max_candidates:
        top = np.argsort(-scores, kind="stable")[:max_candidates]
        boxes, scores, ys, xs = boxes[top], scores[top], ys[top], xs[top]
    keep = nms(boxes, scores, nms_iou)
    return [
        Detection(BoundingBox(*boxes[k]), float(scores[k]), pixel=(int(ys[k]), int(xs[k])))
        for k in keep
    ]


# ---------------------------------------------------------------- text format


def format_detection(frame_id, det: Detection) -> str:
    fields = [str(frame_id), f"{det.score:.4f}", f"{det.box.x_t:.4f}", f"{det.box.y_t:.4f}",
              f"{det.box.x_b:.4f}", f"{det.box.y_b:.4f}"]
    if det.confidence is not None:
        fields.append(f"{det.confidence:.4f}")
    return " ".join(fields)


def write_detections(path, frames: Iterable[tuple]) -> None:
    """frames yields (frame_id, detections)."""
    with open(path, "w") as fh:
        for frame_id, dets in frames:
            for det in dets:
                fh.write(format_detection(frame_id, det) + "\n")


def parse_detections(path) -> dict:
    out: dict = {}
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("ascii", errors="replace").strip()
            if line:
                parts = line.split()
                if len(parts) not in (6, 7):
                    raise FormatError(f"expected 6 or 7 fields, got {len(parts)}", path, offset)
                try:
                    vals = [float(v) for v in parts[1:]]
                    box = BoundingBox(*vals[1:5])
                except ValueError as exc:
                    raise FormatError(str(exc), path, offset) from None
                conf = vals[5] if len(vals) == 6 else None
                out.setdefault(parts[0], []).append(Detection(box, vals[0], conf))
            offset += len(raw)
    return out
