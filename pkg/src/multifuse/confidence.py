"""Auxiliary confidence head trained on a frozen detector, plus the binned TP/FP report."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from multifuse.detector import BoundingBox, Detection, DenseOutput, box_iou_matrix
from multifuse.errors import MissingConfidenceError, ShapeError
from multifuse.nn import Conv2d, Module
from multifuse.tensor import OptimState, Tensor, backward, no_grad, ops, sgd_momentum_step

BIN_EDGES = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])


class ConfidenceHead(Module):
    """conv3x3 -> relu -> conv3x3 on the fused features, upsampled to the score grid, then sigmoid."""

    def __init__(self, c_in: int, rng: np.random.Generator, hidden: int = 16, upsample: int = 4):
        if upsample < 1 or upsample & (upsample - 1):
            raise ValueError(f"upsample factor must be a power of two, got {upsample}")
        self.upsample = upsample
        self.conv1 = Conv2d(c_in, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, 1, 3, rng)
        self.name_parameters()

    def forward(self, fused: Tensor) -> Tensor:
        x = self.conv2(ops.relu(self.conv1(fused)))
        for _ in range(int(math.log2(self.upsample))):
            x = ops.upsample2x_bilinear(x)
        return ops.sigmoid(x)


def tcp_target(dense_pred: DenseOutput, gt_dense: DenseOutput) -> Tensor:
    """Probability the detector gave to the true class at every pixel."""
    s_p = dense_pred.score.data
    s_gt = gt_dense.score.data
    if s_p.shape != s_gt.shape:
        raise ShapeError(f"score maps differ in shape: {s_p.shape} vs {s_gt.shape}")
    return Tensor(np.where(s_gt >= 1.0, s_p, 1.0 - s_p).astype(s_p.dtype))


def confidence_loss(pred: Tensor, target: Tensor) -> Tensor:
    diff = pred - target
    return ops.mean(diff * diff)


def train_confidence(head: ConfidenceHead, frozen_model, samples: Sequence[tuple], epochs: int = 20,
                     lr: float = 0.05, momentum: float = 0.9, seed: int = 0) -> List[float]:
    """Fit ``head`` to the TCP of ``frozen_model``; returns the mean MSE of each epoch.

    samples holds (rgb [3,H,W], thermal [1,H,W], target DenseOutput). The
    detector runs under no_grad once per sample and is never updated.
    """
    cache = []
    with no_grad():
        for rgb, thermal, target in samples:
            out = frozen_model(Tensor(rgb), Tensor(thermal))
            cache.append((out.fused.detach(), tcp_target(out.dense, target)))
    params = head.parameters()
    state = OptimState(base_lr=lr, momentum=momentum, period=10**9)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        losses = []
        for i in rng.permutation(len(cache)):
            fused, target = cache[i]
            loss = confidence_loss(head(fused), target)
            head.zero_grad()
            backward(loss, params=params)
            sgd_momentum_step(params, None, state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)) if losses else 0.0)
    return history


def attach_confidence(dets: Sequence[Detection], conf_map: np.ndarray) -> List[Detection]:
    """Confidence of a detection = head value at the pixel that produced it."""
    grid = conf_map.reshape(conf_map.shape[-2:])
    out = []
    for d in dets:
        if d.pixel is None:
            raise ValueError("detection has no source pixel to read confidence from")
        r, c = d.pixel
        out.append(Detection(d.box, d.score, float(grid[r, c]), d.pixel))
    return out


@dataclass
class ConfidenceBins:
    edges: np.ndarray
    tp: np.ndarray
    fp: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return self.tp + self.fp

    @property
    def tp_rate(self) -> np.ndarray:
        n = self.counts
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, self.tp / np.maximum(n, 1), np.nan)

    @property
    def fp_rate(self) -> np.ndarray:
        return 1.0 - self.tp_rate

    def to_table(self) -> str:
        lines = ["# rates are per bin: tp_rate = tp / (tp + fp), fp_rate = 1 - tp_rate; last bin closed on the right",
                 "bin_lo bin_hi tp_count fp_count tp_rate fp_rate"]
        for i in range(len(self.edges) - 1):
            lines.append(f"{self.edges[i]:.1f} {self.edges[i + 1]:.1f} {int(self.tp[i])} {int(self.fp[i])} "
                         f"{self.tp_rate[i]:.4f} {self.fp_rate[i]:.4f}")
        return "\n".join(lines) + "\n"


def bin_index(confidence: float) -> int:
    if not 0.0 <= confidence <= 1.0:
        raise ValueError(f"confidence {confidence} outside [0, 1]")
    return min(int(np.searchsorted(BIN_EDGES, confidence, side="right")) - 1, len(BIN_EDGES) - 2)


def greedy_tp(dets: Sequence[Detection], gts: Sequence[BoundingBox], iou_match: float) -> np.ndarray:
    """True-positive flag per detection after greedy score-ordered matching."""
    n = len(dets)
    tp = np.zeros(n, dtype=bool)
    if n == 0 or not gts:
        return tp
    order = np.argsort(-np.array([d.score for d in dets]), kind="stable")
    iou = box_iou_matrix(np.array([d.box.as_array() for d in dets]), np.array([g.as_array() for g in gts]))
    taken = np.zeros(len(gts), dtype=bool)
    for i in order:
        cand = np.where(~taken & (iou[i] >= iou_match), iou[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_match:
            taken[j] = True
            tp[i] = True
    return tp


def confidence_report(frames: Sequence[tuple], iou_match: float = 0.5) -> ConfidenceBins:
    """frames holds (detections, gt_boxes) per image."""
    tp_counts = np.zeros(len(BIN_EDGES) - 1, dtype=np.int64)
    fp_counts = np.zeros_like(tp_counts)
    for dets, gts in frames:
        for d in dets:
            if d.confidence is None:
                raise MissingConfidenceError(f"detection {d.box} carries no confidence")
        for d, hit in zip(dets, greedy_tp(dets, gts, iou_match)):
            k = bin_index(d.confidence)
            if hit:
                tp_counts[k] += 1
            else:
                fp_counts[k] += 1
    return ConfidenceBins(BIN_EDGES.copy(), tp_counts, fp_counts)
