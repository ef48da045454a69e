"""Reasonable-setup evaluation: matching, MR-FPPI curve, log-average miss rate, AP."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from multifuse.detector import BoundingBox, Detection, box_iou_matrix
from multifuse.errors import ConfigError, NoGroundTruthError

MR_FLOOR = 1e-6

Image = Tuple[Sequence[Detection], Sequence[BoundingBox]]


def _default_fppi() -> tuple:
    return tuple(float(v) for v in np.logspace(-2.0, 0.0, 9))


@dataclass
class EvalConfig:
    min_height: float = 50.0
    max_occlusion: float = 0.5  # reasonable GT needs occ < this
    match_iou: float = 0.5
    fppi_points: tuple = field(default_factory=_default_fppi)

    def validate(self) -> None:
        if not 0.0 < self.match_iou < 1.0:
            raise ConfigError(f"eval.match_iou must lie in (0, 1), got {self.match_iou}")
        if self.min_height < 0:
            raise ConfigError(f"eval.min_height must be >= 0, got {self.min_height}")
        pts = np.asarray(self.fppi_points, dtype=np.float64)
        if pts.size == 0 or np.any(pts <= 0) or np.any(np.diff(pts) <= 0):
            raise ConfigError("eval.fppi_points must be positive and strictly increasing")

    def is_reasonable(self, box: BoundingBox) -> bool:
        return box.height >= self.min_height and box.occlusion < self.max_occlusion


@dataclass
class MatchResult:
    scores: np.ndarray
    tp: np.ndarray  # bool per detection, in input order
    fp: np.ndarray
    ignored: np.ndarray
    n_gt: int  # reasonable GT count
    matched_gt: np.ndarray  # index of reasonable GT hit per detection, -1 otherwise


def match_detections(dets: Sequence[Detection], gts: Sequence[BoundingBox], cfg: EvalConfig) -> MatchResult:
    """Greedy by score: each detection takes the best-overlapping free reasonable GT.

    Detections that find none but overlap an ignore region are ignored;
    the rest are false positives.
    """
    n = len(dets)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = [g for g in gts if cfg.is_reasonable(g)]
    ignore = [g for g in gts if not cfg.is_reasonable(g)]
    det_arr = np.array([d.box.as_array() for d in dets]).reshape(n, 4)
    iou_keep = box_iou_matrix(det_arr, np.array([g.as_array() for g in keep]).reshape(-1, 4))
    iou_ign = box_iou_matrix(det_arr, np.array([g.as_array() for g in ignore]).reshape(-1, 4))
    taken = np.zeros(len(keep), dtype=bool)
    tp = np.zeros(n, dtype=bool)
    fp = np.zeros(n, dtype=bool)
    ignored = np.zeros(n, dtype=bool)
    matched = np.full(n, -1, dtype=np.int64)
    for i in order:
        best, best_iou = -1, cfg.match_iou
        for j in range(len(keep)):
            if not taken[j] and iou_keep[i, j] >= best_iou and (best < 0 or iou_keep[i, j] > best_iou):
                best, best_iou = j, iou_keep[i, j]
        if best >= 0:
            taken[best] = True
            tp[i] = True
            matched[i] = best
        elif len(ignore) and np.any(iou_ign[i] >= cfg.match_iou):
            ignored[i] = True
        else:
            fp[i] = True
    return MatchResult(scores, tp, fp, ignored, len(keep), matched)


@dataclass
class Curve:
    thresholds: np.ndarray  # descending; first entry is +inf (no detections kept)
    fppi: np.ndarray
    miss_rate: np.ndarray
    recall: np.ndarray
    precision: np.ndarray  # nan where nothing is kept
    n_images: int
    n_gt: int


def mr_fppi_curve(images: Sequence[Image], cfg: EvalConfig) -> Curve:
    """Operating points at every distinct score threshold (plus +inf)."""
    matches = [match_detections(d, g, cfg) for d, g in images]
    n_gt = sum(m.n_gt for m in matches)
    if n_gt == 0:
        raise NoGroundTruthError("no reasonable ground-truth boxes to evaluate against")
    scores = np.concatenate([m.scores for m in matches]) if matches else np.zeros(0)
    tp = np.concatenate([m.tp for m in matches]) if matches else np.zeros(0, bool)
    fp = np.concatenate([m.fp for m in matches]) if matches else np.zeros(0, bool)
    counted = tp | fp
    scores, tp, fp = scores[counted], tp[counted], fp[counted]
    order = np.argsort(-scores, kind="stable")
    scores, tp, fp = scores[order], tp[order], fp[order]
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    # one operating point per distinct score: the end of each tie group
    ends = np.nonzero(np.r_[scores[1:] != scores[:-1], True])[0] if len(scores) else np.zeros(0, int)
    thr = np.r_[np.inf, scores[ends]]
    t = np.r_[0, ctp[ends]].astype(np.float64)
    f = np.r_[0, cfp[ends]].astype(np.float64)
    n_img = max(len(images), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(t + f > 0, t / (t + f), np.nan)
    return Curve(thr, f / n_img, 1.0 - t / n_gt, t / n_gt, precision, len(images), n_gt)


def sample_miss_rates(curve: Curve, points: Sequence[float]) -> np.ndarray:
    """Ceiling rule: at each reference FPPI use the lowest achieved FPPI at or above it.

    Among operating points sharing that FPPI the lowest miss rate is used.
    When no point reaches the reference the final operating point is used.
    """
    out = []
    for ref in points:
        above = curve.fppi >= ref
        if above.any():
            lowest = curve.fppi[above].min()
            out.append(curve.miss_rate[curve.fppi == lowest].min())
        else:
            out.append(curve.miss_rate[-1])
    return np.asarray(out, dtype=np.float64)


def log_average_miss_rate(images: Sequence[Image], cfg: Optional[EvalConfig] = None) -> float:
    cfg = cfg or EvalConfig()
    curve = mr_fppi_curve(images, cfg)
    mr = sample_miss_rates(curve, cfg.fppi_points)
    return float(math.exp(np.mean(np.log(np.maximum(mr, MR_FLOOR)))))


def precision_envelope(recall: np.ndarray, precision: np.ndarray) -> np.ndarray:
    env = np.nan_to_num(precision, nan=0.0).copy()
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    return env


def average_precision(images: Sequence[Image], cfg: Optional[EvalConfig] = None) -> float:
    """All-point interpolated AP: area under the precision envelope over recall."""
    cfg = cfg or EvalConfig()
    c = mr_fppi_curve(images, cfg)
    env = precision_envelope(c.recall, c.precision)
    steps = np.diff(c.recall)
    return float(np.sum(steps * env[1:]))


def recall_at_fppi(images: Sequence[Image], cfg: Optional[EvalConfig] = None, max_fppi: float = 1.0) -> float:
    cfg = cfg or EvalConfig()
    c = mr_fppi_curve(images, cfg)
    ok = c.fppi <= max_fppi
    return float(c.recall[ok].max())


# ---------------------------------------------------------------- reports


@dataclass
class SplitMetrics:
    frames: int
    gt: int
    detections: int
    mr: float
    ap: float
    curve: List[tuple]  # (threshold, fppi, miss_rate)


@dataclass
class EvalReport:
    splits: Dict[str, Optional[SplitMetrics]]
    config: EvalConfig = field(default_factory=EvalConfig)

    def mr(self, split: str = "all") -> Optional[float]:
        s = self.splits.get(split)
        return None if s is None else s.mr

    def to_text(self) -> str:
        lines = [
            "convention.ap all-point-interpolated",
            f"convention.mr log-average-{len(self.config.fppi_points)}pt-ceiling",
            f"convention.min_height {self.config.min_height:g}",
            f"convention.max_occlusion {self.config.max_occlusion:g}",
            f"convention.match_iou {self.config.match_iou:g}",
        ]
        for name, s in self.splits.items():
            if s is None:
                lines.append(f"{name}.status absent")
                continue
            lines += [
                f"{name}.status present",
                f"{name}.frames {s.frames}",
                f"{name}.gt {s.gt}",
                f"{name}.detections {s.detections}",
                f"{name}.mr {s.mr:.6f}",
                f"{name}.ap {s.ap:.6f}",
            ]
        return "\n".join(lines) + "\n"

    def curve_csv(self) -> str:
        buf = io.StringIO()
        buf.write("split,threshold,fppi,miss_rate\n")
        for name, s in self.splits.items():
            if s is None:
                continue
            for thr, fppi, mr in s.curve:
                buf.write(f"{name},{thr:.6g},{fppi:.6g},{mr:.6g}\n")
        return buf.getvalue()


def _metrics(images: List[Image], cfg: EvalConfig) -> Optional[SplitMetrics]:
    if not images:
        return None
    try:
        curve = mr_fppi_curve(images, cfg)
    except NoGroundTruthError:
        return None
    mr = log_average_miss_rate(images, cfg)
    ap = average_precision(images, cfg)
    pts = list(zip(curve.thresholds.tolist(), curve.fppi.tolist(), curve.miss_rate.tolist()))
    return SplitMetrics(len(images), curve.n_gt, sum(len(d) for d, _ in images), mr, ap, pts)


def split_report(frames: Sequence[tuple], detections: Dict, cfg: Optional[EvalConfig] = None) -> EvalReport:
    """frames holds (frame_id, time_of_day, gt_boxes); detections maps frame_id to its detections.

    A split with no frames (or no reasonable GT) is reported as absent.
    """
    cfg = cfg or EvalConfig()
    cfg.validate()
    groups: Dict[str, List[Image]] = {"all": [], "day": [], "night": []}
    for frame_id, tod, gts in frames:
        if tod not in ("day", "night"):
            raise ValueError(f"frame {frame_id}: time of day must be day or night, got {tod!r}")
        item = (list(detections.get(frame_id, [])), list(gts))
        groups["all"].append(item)
        groups[tod].append(item)
    return EvalReport({k: _metrics(v, cfg) for k, v in groups.items()}, cfg)
