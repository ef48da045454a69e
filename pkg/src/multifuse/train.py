"""Training loop, inference and evaluation helpers shared by the CLI and the benchmarks."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from multifuse.checkpoint import save_model
from multifuse.config import DetectConfig
from multifuse.data import (
    CurriculumSchedule,
    SamplePair,
    TrainSample,
    curriculum_mask,
    mixup,
    simple_augment,
)
from multifuse.detector import DenseOutput, Detection, decode_detections, rasterize_gt, total_loss
from multifuse.errors import DegenerateBoxError, NumericError
from multifuse.metrics import EvalConfig, EvalReport, split_report
from multifuse.model import MultimodalDetector
from multifuse.tensor import OptimState, Tensor, backward, no_grad, sgd_momentum_step

log = logging.getLogger(__name__)

MODES = ("multimodal", "visible", "thermal")


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def modality_inputs(pair: SamplePair, mode: str = "multimodal") -> tuple:
    """Image tensors for the two encoders; the unused modality is fed as zeros."""
    rgb, thermal = pair.rgb, pair.thermal
    if check_mode(mode) == "visible":
        thermal = np.zeros_like(thermal)
    elif mode == "thermal":
        rgb = np.zeros_like(rgb)
    return Tensor(rgb[None]), Tensor(thermal[None])


def make_target(pair: SamplePair, model: MultimodalDetector) -> DenseOutput:
    stride = model.output_stride
    H, W = pair.size
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateBoxError)
        return rasterize_gt(pair.boxes, (H // stride, W // stride), stride)


@dataclass
class TrainOptions:
    steps: int = 2000
    lambda_g: float = 1.0
    base_lr: float = 0.01
    momentum: float = 0.9
    lr_period: int = 5000
    batch_size: int = 1
    simple_augment: bool = False
    augment_p: float = 0.3
    augment_scale: tuple = (0.8, 1.2)
    augment_photometric: bool = True
    mixup: bool = False
    mixup_alpha: float = 0.2
    mixup_prob: float = 0.5
    curriculum: bool = False
    curriculum_max: float = 0.7
    curriculum_ramp: float = 0.8
    grad_clip: Optional[float] = None
    mode: str = "multimodal"
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None
    log_path: Optional[str] = None
    stop_loss: Optional[float] = None  # stop once the running mean of the last epoch drops below

    @classmethod
    def from_config(cls, train_cfg, **overrides) -> "TrainOptions":
        opts = cls(
            steps=train_cfg.steps,
            lambda_g=train_cfg.lambda_g,
            base_lr=train_cfg.base_lr,
            momentum=train_cfg.momentum,
            lr_period=train_cfg.lr_period,
            batch_size=train_cfg.batch_size * train_cfg.grad_accumulation,
            simple_augment=train_cfg.simple_augment,
            augment_p=train_cfg.augment_p,
            augment_scale=tuple(train_cfg.augment_scale),
            augment_photometric=train_cfg.augment_photometric,
            mixup=train_cfg.mixup,
            mixup_alpha=train_cfg.mixup_alpha,
            mixup_prob=train_cfg.mixup_prob,
            curriculum=train_cfg.curriculum,
            curriculum_max=train_cfg.curriculum_max,
            curriculum_ramp=train_cfg.curriculum_ramp,
            grad_clip=train_cfg.grad_clip,
            seed=train_cfg.seed,
            checkpoint_every=train_cfg.checkpoint_every,
        )
        for k, v in overrides.items():
            setattr(opts, k, v)
        return opts


@dataclass
class TrainLog:
    losses: List[float] = field(default_factory=list)
    score_losses: List[float] = field(default_factory=list)
    geometry_losses: List[float] = field(default_factory=list)
    seconds: float = 0.0

    def running(self, window: int) -> float:
        tail = self.losses[-window:]
        return float(np.mean(tail)) if tail else float("nan")


def _augment(pair: SamplePair, rng: np.random.Generator, opts: TrainOptions) -> SamplePair:
    return simple_augment(pair, rng, effects=opts.augment_photometric, p=opts.augment_p,
                          scale_range=tuple(opts.augment_scale))


def _sample_for_step(dataset: Sequence[SamplePair], idx: int, step: int, opts: TrainOptions,
                     model: MultimodalDetector, rng: np.random.Generator, schedule) -> TrainSample:
    pair = dataset[idx]
    if opts.simple_augment:
        pair = _augment(pair, rng, opts)
    sample = TrainSample(pair, make_target(pair, model))
    if opts.mixup and len(dataset) > 1 and rng.random() < opts.mixup_prob:
        j = int(rng.integers(len(dataset) - 1))
        j += j >= idx
        other = dataset[j]
        if opts.simple_augment:
            other = _augment(other, rng, opts)
        sample = mixup(sample, TrainSample(other, make_target(other, model)), rng=rng, alpha=opts.mixup_alpha)
    if opts.curriculum:
        progress = step / max(opts.steps - 1, 1)
        sample = TrainSample(curriculum_mask(sample.pair, schedule, progress, rng), sample.target)
    return sample


def train(model: MultimodalDetector, dataset: Sequence[SamplePair], opts: TrainOptions,
          callback: Optional[Callable[[int, float], bool]] = None) -> TrainLog:
    """Batch-size-1 style momentum SGD; a batch averages the gradients of its samples.

    ``callback(step, loss)`` may return True to stop early.
    """
    if not dataset:
        raise ValueError("training set is empty")
    check_mode(opts.mode)
    rng = np.random.default_rng(opts.seed)
    schedule = CurriculumSchedule(opts.curriculum_max, opts.curriculum_ramp)
    params = model.parameters()
    state = OptimState(base_lr=opts.base_lr, momentum=opts.momentum, period=opts.lr_period)
    history = TrainLog()
    order: List[int] = []
    t0 = time.perf_counter()
    log_fh = open(opts.log_path, "w") if opts.log_path else None
    try:
        for step in range(opts.steps):
            grads = None
            losses = []
            for _ in range(opts.batch_size):
                if not order:
                    order = list(rng.permutation(len(dataset)))
                sample = _sample_for_step(dataset, order.pop(), step, opts, model, rng, schedule)
                rgb, thermal = modality_inputs(sample.pair, opts.mode)
                try:
                    out = model(rgb, thermal)
                    terms = total_loss(out.dense, sample.target, opts.lambda_g)
                    model.zero_grad()
                    backward(terms.total, params=params)
                except NumericError as exc:
                    log.error("non-finite value at step %d: %s", step, exc)
                    raise NumericError(f"step {step}: {exc}") from exc
                g = [p.grad for p in params]
                grads = g if grads is None else [a + b for a, b in zip(grads, g)]
                losses.append(terms.as_floats())
            if opts.batch_size > 1:
                grads = [g / opts.batch_size for g in grads]
            if opts.grad_clip is not None:
                norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
                if norm > opts.grad_clip:
                    grads = [g * (opts.grad_clip / norm) for g in grads]
            sgd_momentum_step(params, grads, state)
            total = float(np.mean([t["total"] for t in losses]))
            history.losses.append(total)
            history.score_losses.append(float(np.mean([t["score"] for t in losses])))
            history.geometry_losses.append(float(np.mean([t["geometry"] for t in losses])))
            if log_fh:
                log_fh.write(json.dumps({"step": step, "lr": state.lr, **losses[-1], "total": total}) + "\n")
            if opts.checkpoint_path and opts.checkpoint_every and (step + 1) % opts.checkpoint_every == 0:
                save_model(opts.checkpoint_path, model)
            if callback is not None and callback(step, total):
                break
            if opts.stop_loss is not None and history.running(len(dataset)) < opts.stop_loss \
                    and len(history.losses) >= len(dataset):
                break
    finally:
        if log_fh:
            log_fh.close()
    model.zero_grad()
    history.seconds = time.perf_counter() - t0
    if opts.checkpoint_path:
        save_model(opts.checkpoint_path, model)
    return history


def predict(model: MultimodalDetector, pair: SamplePair, mode: str = "multimodal",
            detect: Optional[DetectConfig] = None, confidence_head=None) -> List[Detection]:
    detect = detect or DetectConfig()
    rgb, thermal = modality_inputs(pair, mode)
    with no_grad():
        out = model(rgb, thermal)
        dets = decode_detections(out.dense, detect.score_thresh, detect.nms_iou, detect.max_candidates,
                                 detect.min_inside)
        if confidence_head is not None:
            from multifuse.confidence import attach_confidence

            dets = attach_confidence(dets, confidence_head(out.fused).data)
    return dets


def evaluate(model: MultimodalDetector, dataset: Sequence[SamplePair], cfg: Optional[EvalConfig] = None,
             mode: str = "multimodal", detect: Optional[DetectConfig] = None) -> EvalReport:
    frames = []
    dets = {}
    for i, pair in enumerate(dataset):
        fid = f"{i:06d}"
        frames.append((fid, pair.time_of_day, pair.boxes))
        dets[fid] = predict(model, pair, mode, detect)
    return split_report(frames, dets, cfg)


def loss_on(model: MultimodalDetector, dataset: Sequence[SamplePair], lambda_g: float = 1.0,
            mode: str = "multimodal") -> float:
    """Mean total loss over ``dataset`` without augmentation."""
    vals = []
    with no_grad():
        for pair in dataset:
            rgb, thermal = modality_inputs(pair, mode)
            out = model(rgb, thermal)
            vals.append(total_loss(out.dense, make_target(pair, model), lambda_g).total.item())
    return float(np.mean(vals))
