"""Synthetic paired RGB/thermal scenes, augmentation, mixup, curriculum masking, dataset I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from multifuse.detector import BoundingBox, DenseOutput, box_iou_matrix
from multifuse.errors import ConfigError, FormatError, MissingModalityError, ShapeError
from multifuse.tensor import Tensor

NIGHT_BELOW = 0.5


@dataclass
class SceneSpec:
    size: tuple = (64, 64)  # (H, W)
    pedestrians: tuple = (0, 3)
    height: tuple = (18.0, 40.0)
    illumination: float = 1.0
    shift: tuple = (0, 2)  # max |dx|, |dy| drawn from this integer range
    occlusion_prob: float = 0.2
    noise_rgb: float = 0.02
    noise_thermal: float = 0.02
    max_overlap: float = 1.0  # pairwise box IoU cap; placements are redrawn (up to 50 times) above it
    seed: int = 0

    def validate(self) -> None:
        H, W = self.size
        if H < 8 or W < 8:
            raise ConfigError(f"scene size {self.size} too small")
        for name in ("pedestrians", "height", "shift"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"scene.{name}: empty range {lo}..{hi}")
        if self.pedestrians[0] < 0 or self.shift[0] < 0:
            raise ConfigError("scene.pedestrians and scene.shift must be non-negative")
        if self.height[0] < 4 or self.height[1] > H - 2:
            raise ConfigError(f"scene.height {self.height} does not fit image height {H}")
        if not 0 < self.illumination <= 1:
            raise ConfigError(f"scene.illumination must lie in (0, 1], got {self.illumination}")
        if not 0 <= self.occlusion_prob <= 1:
            raise ConfigError("scene.occlusion_prob must lie in [0, 1]")
        if self.noise_rgb < 0 or self.noise_thermal < 0:
            raise ConfigError("scene noise levels must be non-negative")
        if not 0 <= self.max_overlap <= 1:
            raise ConfigError("scene.max_overlap must lie in [0, 1]")

    @property
    def time_of_day(self) -> str:
        return "night" if self.illumination < NIGHT_BELOW else "day"


@dataclass
class SamplePair:
    rgb: np.ndarray  # [3, H, W] float32 in [0, 1]
    thermal: np.ndarray  # [1, H, W]
    boxes: List[BoundingBox]
    time_of_day: str = "day"
    shift: tuple = (0.0, 0.0)  # thermal content sits at rgb position + shift

    def __post_init__(self):
        if self.rgb.shape[1:] != self.thermal.shape[1:]:
            raise ShapeError(f"modalities differ in size: {self.rgb.shape} vs {self.thermal.shape}")

    @property
    def size(self) -> tuple:
        return self.rgb.shape[1:]

    def thermal_boxes(self) -> List[BoundingBox]:
        return [b.shifted(*self.shift) for b in self.boxes]

    def copy(self, **changes) -> "SamplePair":
        base = dict(rgb=self.rgb.copy(), thermal=self.thermal.copy(), boxes=list(self.boxes),
                    time_of_day=self.time_of_day, shift=tuple(self.shift))
        base.update(changes)
        return SamplePair(**base)


@dataclass
class TrainSample:
    pair: SamplePair
    target: DenseOutput


# ---------------------------------------------------------------- scene synthesis


def _smooth_noise(rng: np.random.Generator, shape: tuple, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells))
    zy, zx = shape[0] / cells, shape[1] / cells
    return ndimage.zoom(coarse, (zy, zx), order=1, mode="nearest")[: shape[0], : shape[1]]


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return (u * u + v * v) <= 1.0


def _silhouette(shape: tuple, box: tuple, pose: np.ndarray, ss: int = 2) -> np.ndarray:
    """Articulated-blob pedestrian covering ``box`` = (x_t, y_t, x_b, y_b), anti-aliased by supersampling."""
    H, W = shape
    x_t, y_t, x_b, y_b = box
    h, w = y_b - y_t, x_b - x_t
    ys = (np.arange(H * ss) + 0.5) / ss
    xs = (np.arange(W * ss) + 0.5) / ss
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    cx = x_t + w / 2
    arm_swing, leg_l, leg_r, lean = pose
    parts = [
        _ellipse(yy, xx, y_t + 0.09 * h, cx + lean * w * 0.1, 0.09 * h, 0.2 * w),  # head
        _ellipse(yy, xx, y_t + 0.38 * h, cx, 0.21 * h, 0.3 * w),  # torso
        _ellipse(yy, xx, y_t + 0.36 * h, cx - 0.34 * w, 0.17 * h, 0.09 * w, arm_swing),  # arms
        _ellipse(yy, xx, y_t + 0.36 * h, cx + 0.34 * w, 0.17 * h, 0.09 * w, -arm_swing),
        _ellipse(yy, xx, y_t + 0.77 * h, cx - 0.17 * w, 0.23 * h, 0.13 * w, leg_l),  # legs
        _ellipse(yy, xx, y_t + 0.77 * h, cx + 0.17 * w, 0.23 * h, 0.13 * w, leg_r),
    ]
    mask = np.zeros_like(yy, dtype=bool)
    for p in parts:
        mask |= p
    mask &= (yy >= y_t) & (yy <= y_b) & (xx >= x_t) & (xx <= x_b)
    return mask.reshape(H, ss, W, ss).mean(axis=(1, 3))


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _max_iou(box: tuple, boxes: Sequence[BoundingBox]) -> float:
    if not boxes:
        return 0.0
    return float(box_iou_matrix(np.array([box]), np.array([b.as_array() for b in boxes])).max())


def generate_scene(spec: SceneSpec) -> SamplePair:
    """Render one deterministic RGB/thermal pair from ``spec``.

    RGB contrast between pedestrians and background scales with the
    illumination level; thermal signatures do not depend on it. The thermal
    layer is displaced by a random integer shift.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W = spec.size

    bg_color = rng.uniform(0.25, 0.75, size=3)
    texture = _smooth_noise(rng, (H, W), 8) - 0.5
    tint = rng.uniform(0.1, 0.25, size=3)
    bg_rgb = np.clip(bg_color[:, None, None] + tint[:, None, None] * texture[None], 0, 1)
    bg_th = 0.25 + 0.12 * (_smooth_noise(rng, (H, W), 6) - 0.5)

    max_shift = int(rng.integers(spec.shift[0], spec.shift[1] + 1))
    dx = int(rng.integers(-max_shift, max_shift + 1))
    dy = int(rng.integers(-max_shift, max_shift + 1))

    n = int(rng.integers(spec.pedestrians[0], spec.pedestrians[1] + 1))
    # every random draw happens regardless of illumination so day/night twins share geometry
    ped_rgb = np.zeros((3, H, W))
    ped_mask = np.zeros((H, W))
    th_mask = np.zeros((H, W))
    th_value = np.zeros((H, W))
    occluders = []
    boxes = []
    margin = 1 + spec.shift[1]
    for _ in range(n):
        h = float(rng.uniform(*spec.height))
        w = 0.42 * h * float(rng.uniform(0.9, 1.1))
        x_t = float(rng.uniform(margin, W - margin - w))
        y_t = float(rng.uniform(margin, H - margin - h))
        for _ in range(50):
            if _max_iou((x_t, y_t, x_t + w, y_t + h), boxes) <= spec.max_overlap:
                break
            x_t = float(rng.uniform(margin, W - margin - w))
            y_t = float(rng.uniform(margin, H - margin - h))
        pose = rng.uniform([-0.4, -0.35, -0.35, -1.0], [0.4, 0.35, 0.35, 1.0])
        sign = np.where(rng.random(3) < 0.5, -1.0, 1.0)
        color = np.clip(bg_color + sign * rng.uniform(0.3, 0.5, size=3), 0.0, 1.0)
        temp = float(rng.uniform(0.75, 0.95))
        occ = float(rng.uniform(0.2, 0.8)) if rng.random() < spec.occlusion_prob else 0.0
        occ_rgb = rng.uniform(0.2, 0.6, size=3)
        box = (x_t, y_t, x_t + w, y_t + h)
        m = _silhouette((H, W), box, pose)
        ped_rgb = ped_rgb * (1 - m) + color[:, None, None] * m
        ped_mask = np.maximum(ped_mask, m)
        mt = _silhouette((H, W), (x_t + dx, y_t + dy, x_t + w + dx, y_t + h + dy), pose)
        th_value = th_value * (1 - mt) + temp * mt
        th_mask = np.maximum(th_mask, mt)
        if occ > 0:
            occluders.append((x_t - 1, y_t + h * (1 - occ), x_t + w + 1, y_t + h, occ_rgb))
        boxes.append(BoundingBox(x_t, y_t, x_t + w, y_t + h, occ))

    contrast = spec.illumination
    brightness = 0.3 + 0.7 * spec.illumination
    scene = bg_rgb + contrast * (ped_rgb - bg_rgb) * ped_mask[None]
    thermal = bg_th + (th_value - bg_th) * th_mask

    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    for ox_t, oy_t, ox_b, oy_b, col in occluders:
        r = (xx >= ox_t) & (xx <= ox_b) & (yy >= oy_t) & (yy <= oy_b)
        scene[:, r] = (bg_rgb + contrast * (col[:, None, None] - bg_rgb))[:, r]
        rt = (xx >= ox_t + dx) & (xx <= ox_b + dx) & (yy >= oy_t + dy) & (yy <= oy_b + dy)
        thermal[rt] = 0.3

    rgb = brightness * scene + spec.noise_rgb * rng.standard_normal((3, H, W))
    thermal = thermal + spec.noise_thermal * rng.standard_normal((H, W))
    return SamplePair(
        rgb=_quantize(rgb),
        thermal=_quantize(thermal[None]),
        boxes=boxes,
        time_of_day=spec.time_of_day,
        shift=(float(dx), float(dy)),
    )


# ---------------------------------------------------------------- augmentation


def _rescale(img: np.ndarray, s: float, fill: np.ndarray) -> np.ndarray:
    C, H, W = img.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    sy = (yy + 0.5) / s - 0.5
    sx = (xx + 0.5) / s - 0.5
    # anything within half a pixel of the border takes the edge value; beyond that, the fill
    outside = (sy < -0.5) | (sy > H - 0.5) | (sx < -0.5) | (sx > W - 0.5)
    out = np.empty_like(img)
    for c in range(C):
        out[c] = ndimage.map_coordinates(img[c], [sy, sx], order=1, mode="nearest")
        out[c][outside] = fill[c]
    return out


def _clip_box(b: BoundingBox, H: int, W: int, min_size: float = 2.0) -> Optional[BoundingBox]:
    x_t, y_t = max(b.x_t, 0.0), max(b.y_t, 0.0)
    x_b, y_b = min(b.x_b, float(W)), min(b.y_b, float(H))
    if x_b - x_t < min_size or y_b - y_t < min_size:
        return None
    return BoundingBox(x_t, y_t, x_b, y_b, b.occlusion)


def flip_pair(pair: SamplePair) -> SamplePair:
    W = pair.size[1]
    boxes = [BoundingBox(W - b.x_b, b.y_t, W - b.x_t, b.y_b, b.occlusion) for b in pair.boxes]
    return pair.copy(rgb=pair.rgb[:, :, ::-1].copy(), thermal=pair.thermal[:, :, ::-1].copy(),
                     boxes=boxes, shift=(-pair.shift[0], pair.shift[1]))


def scale_pair(pair: SamplePair, s: float) -> SamplePair:
    if s == 1.0:
        return pair.copy()
    H, W = pair.size
    rgb = _rescale(pair.rgb, s, pair.rgb.mean(axis=(1, 2)))
    thermal = _rescale(pair.thermal, s, pair.thermal.mean(axis=(1, 2)))
    boxes = [c for c in (_clip_box(b.scaled(s), H, W) for b in pair.boxes) if c is not None]
    return pair.copy(rgb=rgb.astype(np.float32), thermal=thermal.astype(np.float32), boxes=boxes,
                     shift=(pair.shift[0] * s, pair.shift[1] * s))


def _photometric(img: np.ndarray, rng: np.random.Generator, p: float) -> np.ndarray:
    if rng.random() < p:
        c = rng.uniform(0.7, 1.3)
        m = img.mean()
        img = (img - m) * c + m
    if rng.random() < p:
        img = img + rng.uniform(0.0, 0.03) * rng.standard_normal(img.shape)
    if rng.random() < p:
        img = ndimage.uniform_filter(img, size=(1, 3, 3), mode="nearest")
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def simple_augment(
    pair: SamplePair,
    rng: np.random.Generator,
    scale: Optional[float] = None,
    flip: Optional[bool] = None,
    effects: bool = True,
    p: float = 0.3,
    scale_range: tuple = (0.8, 1.2),
) -> SamplePair:
    """Random scale, horizontal flip, then contrast/noise/blur each with probability ``p``.

    Geometry is shared by both modalities; photometric draws are per modality.
    """
    s = float(rng.uniform(*scale_range)) if scale is None else scale
    do_flip = (rng.random() < p) if flip is None else flip
    out = scale_pair(pair, s)
    if do_flip:
        out = flip_pair(out)
    if effects:
        out.rgb = _photometric(out.rgb, rng, p)
        out.thermal = _photometric(out.thermal, rng, p)
    return out


# ---------------------------------------------------------------- mixup


def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mixup: {what} shapes differ ({a.shape} vs {b.shape})")


def mixup(a: TrainSample, b: TrainSample, omega: Optional[float] = None,
          rng: Optional[np.random.Generator] = None, alpha: float = 0.2) -> TrainSample:
    """Convex combination of two samples and their dense targets.

    Images, score maps and geometry weights mix linearly. Geometry targets
    mix linearly where both samples are positive and keep the single
    positive sample's offsets elsewhere.
    """
    if omega is None:
        if rng is None:
            raise ValueError("mixup needs omega or an rng to draw it")
        omega = float(rng.beta(alpha, alpha))
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"mixup weight must lie in [0, 1], got {omega}")
    _check_same(a.pair.rgb, b.pair.rgb, "rgb")
    _check_same(a.pair.thermal, b.pair.thermal, "thermal")
    _check_same(a.target.score.data, b.target.score.data, "score map")
    if omega == 1.0:
        return TrainSample(a.pair.copy(), _copy_target(a.target))
    if omega == 0.0:
        return TrainSample(b.pair.copy(), _copy_target(b.target))
    w1, w2 = np.float32(omega), np.float32(1.0 - omega)
    pair = SamplePair(
        rgb=w1 * a.pair.rgb + w2 * b.pair.rgb,
        thermal=w1 * a.pair.thermal + w2 * b.pair.thermal,
        boxes=list(a.pair.boxes) + list(b.pair.boxes),
        time_of_day=a.pair.time_of_day,
        shift=a.pair.shift,
    )
    wa = _weight(a.target)
    wb = _weight(b.target)
    ga, gb = a.target.geometry.data, b.target.geometry.data
    both = (wa > 0) & (wb > 0)
    geo = np.where(both, w1 * ga + w2 * gb, np.where(wa > 0, ga, gb)).astype(np.float32)
    target = DenseOutput(
        score=Tensor(w1 * a.target.score.data + w2 * b.target.score.data),
        geometry=Tensor(geo),
        stride=a.target.stride,
        weight=(w1 * wa + w2 * wb).astype(np.float32),
    )
    return TrainSample(pair, target)


def _weight(t: DenseOutput) -> np.ndarray:
    return t.weight if t.weight is not None else (t.score.data >= 1.0).astype(np.float32)


def _copy_target(t: DenseOutput) -> DenseOutput:
    return DenseOutput(score=Tensor(t.score.data.copy()), geometry=Tensor(t.geometry.data.copy()),
                       stride=t.stride, weight=None if t.weight is None else t.weight.copy())


# ---------------------------------------------------------------- curriculum


@dataclass
class CurriculumSchedule:
    """Masked fraction: linear from 0 to ``max_fraction`` over the first ``ramp_end`` of training."""

    max_fraction: float = 0.7
    ramp_end: float = 0.8

    def __post_init__(self):
        if not 0 <= self.max_fraction < 1:
            raise ConfigError(f"curriculum max fraction must lie in [0, 1), got {self.max_fraction}")
        if not 0 < self.ramp_end <= 1:
            raise ConfigError(f"curriculum ramp end must lie in (0, 1], got {self.ramp_end}")

    def __call__(self, progress: float) -> float:
        progress = min(max(progress, 0.0), 1.0)
        return self.max_fraction * min(progress / self.ramp_end, 1.0)


def _pixel_span(lo: float, hi: float, limit: int) -> tuple:
    """Inclusive index range of pixels whose centres fall inside [lo, hi]."""
    a = max(int(math.ceil(lo - 0.5)), 0)
    b = min(int(math.floor(hi - 0.5)), limit - 1)
    return a, b


def _mask_rect(bw: int, bh: int, fraction: float) -> tuple:
    """Integer (w, h) within the box whose area fraction is closest to ``fraction``."""
    target = fraction * bw * bh
    best = None
    for h in range(1, bh + 1):
        for w in (int(math.floor(target / h)), int(math.ceil(target / h))):
            if not 1 <= w <= bw:
                continue
            key = (abs(w * h - target), abs(w / bw - h / bh))
            if best is None or key < best[0]:
                best = (key, w, h)
    return best[1], best[2]


def _overlaps_any(x0, y0, w, h, boxes, pad=1.0) -> bool:
    for b in boxes:
        if x0 < b.x_b + pad and x0 + w > b.x_t - pad and y0 < b.y_b + pad and y0 + h > b.y_t - pad:
            return True
    return False


def curriculum_mask(pair: SamplePair, schedule: CurriculumSchedule, progress: float,
                    rng: np.random.Generator, return_masks: bool = False):
    """Cover a random rectangle of each box with background texture; boxes stay unchanged.

    With ``return_masks`` the boolean RGB-frame mask of each box is returned
    alongside the new pair.
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    fraction = schedule(progress)
    out = pair.copy()
    H, W = pair.size
    masks = []
    if fraction <= 0.0:
        masks = [np.zeros((H, W), dtype=bool) for _ in pair.boxes]
        return (out, masks) if return_masks else out
    sdx, sdy = int(round(pair.shift[0])), int(round(pair.shift[1]))
    t_boxes = pair.thermal_boxes()
    for box in pair.boxes:
        c0, c1 = _pixel_span(box.x_t, box.x_b, W)
        r0, r1 = _pixel_span(box.y_t, box.y_b, H)
        bw, bh = c1 - c0 + 1, r1 - r0 + 1
        mask = np.zeros((H, W), dtype=bool)
        if bw < 1 or bh < 1:
            masks.append(mask)
            continue
        w, h = _mask_rect(bw, bh, fraction)
        x0 = c0 + int(rng.integers(0, bw - w + 1))
        y0 = r0 + int(rng.integers(0, bh - h + 1))
        mask[y0 : y0 + h, x0 : x0 + w] = True
        masks.append(mask)
        src = None
        for _ in range(50):
            sx = int(rng.integers(0, W - w + 1))
            sy = int(rng.integers(0, H - h + 1))
            tx, ty = sx + sdx, sy + sdy
            if (not _overlaps_any(sx, sy, w, h, pair.boxes) and not _overlaps_any(sx, sy, w, h, t_boxes)
                    and 0 <= tx <= W - w and 0 <= ty <= H - h):
                src = (sx, sy)
                break
        if src is not None:
            sx, sy = src
            out.rgb[:, y0 : y0 + h, x0 : x0 + w] = pair.rgb[:, sy : sy + h, sx : sx + w]
            patch_t = pair.thermal[:, sy + sdy : sy + sdy + h, sx + sdx : sx + sdx + w]
        else:
            fill = np.median(pair.rgb.reshape(3, -1), axis=1)
            out.rgb[:, y0 : y0 + h, x0 : x0 + w] = fill[:, None, None]
            patch_t = np.full((1, h, w), np.median(pair.thermal))
        ty0, tx0 = y0 + sdy, x0 + sdx
        ya, yb = max(ty0, 0), min(ty0 + h, H)
        xa, xb = max(tx0, 0), min(tx0 + w, W)
        if ya < yb and xa < xb:
            out.thermal[:, ya:yb, xa:xb] = patch_t[:, ya - ty0 : yb - ty0, xa - tx0 : xb - tx0]
    return (out, masks) if return_masks else out


def box_pixel_count(box: BoundingBox, size: tuple) -> int:
    H, W = size
    c0, c1 = _pixel_span(box.x_t, box.x_b, W)
    r0, r1 = _pixel_span(box.y_t, box.y_b, H)
    return max(c1 - c0 + 1, 0) * max(r1 - r0 + 1, 0)


# ---------------------------------------------------------------- split synthesis


def split_seeds(seed: int, counts: Sequence[int]) -> List[List[int]]:
    """Per-split scene seeds, pairwise distinct across all splits."""
    used: set = set()
    out = []
    for k, n in enumerate(counts):
        gen = np.random.default_rng(np.random.SeedSequence([seed, k]))
        seeds: List[int] = []
        while len(seeds) < n:
            v = int(gen.integers(0, 2**62))
            if v not in used:
                used.add(v)
                seeds.append(v)
        out.append(seeds)
    return out


def synthesize(base: SceneSpec, counts: dict, night_fraction: float = 0.5, night_illumination: float = 0.08,
               seed: int = 0) -> List[tuple]:
    """Generate (split, seed, SamplePair) for every frame.

    Each split gets exactly round(n * night_fraction) night frames, chosen
    at random positions; the remaining frames are fully lit.
    """
    if not 0.0 <= night_fraction <= 1.0:
        raise ConfigError(f"night_fraction must lie in [0, 1], got {night_fraction}")
    names = list(counts)
    frames = []
    for k, (name, seeds) in enumerate(zip(names, split_seeds(seed, [counts[n] for n in names]))):
        n = len(seeds)
        picker = np.random.default_rng(np.random.SeedSequence([seed, k, 1]))
        night = set(picker.permutation(n)[: int(round(n * night_fraction))].tolist())
        for i, s in enumerate(seeds):
            illum = night_illumination if i in night else 1.0
            frames.append((name, s, generate_scene(replace(base, illumination=illum, seed=s))))
    return frames


# ---------------------------------------------------------------- dataset I/O


def _write_pnm(path: Path, img: np.ndarray) -> None:
    """img is [C, H, W] in [0, 1] with C = 3 (PPM) or 1 (PGM)."""
    C, H, W = img.shape
    magic = b"P6" if C == 3 else b"P5"
    raw = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    body = raw.transpose(1, 2, 0).tobytes() if C == 3 else raw[0].tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (W, H) + body)


def _read_pnm(path: Path, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    expected = b"P6" if channels == 3 else b"P5"
    if data[:2] != expected:
        raise FormatError(f"expected {expected.decode()} magic", path, 0)
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header", path, pos)
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise FormatError(f"bad header token {data[start:pos]!r}", path, start) from None
    W, H, maxval = tokens
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}", path, pos)
    pos += 1  # single whitespace before raster
    need = W * H * channels
    if len(data) - pos != need:
        raise FormatError(f"raster has {len(data) - pos} bytes, expected {need}", path, pos)
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    img = raw.reshape(H, W, channels).transpose(2, 0, 1)
    return (img.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def _format_ann(boxes: Sequence[BoundingBox]) -> str:
    return "".join(f"person {b.x_t!r} {b.y_t!r} {b.x_b!r} {b.y_b!r} {b.occlusion!r}\n" for b in boxes)


def _parse_ann(path: Path, frame: str) -> List[BoundingBox]:
    boxes = []
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("ascii", errors="replace").strip()
            if line:
                parts = line.split()
                if len(parts) != 6 or parts[0] != "person":
                    raise FormatError(f"frame {frame}: expected 'person x_t y_t x_b y_b occ'", path, offset)
                try:
                    x_t, y_t, x_b, y_b, occ = (float(v) for v in parts[1:])
                except ValueError:
                    raise FormatError(f"frame {frame}: non-numeric field", path, offset) from None
                if not (x_t < x_b and y_t < y_b):
                    raise FormatError(f"frame {frame}: box needs x_t < x_b and y_t < y_b", path, offset)
                if not 0.0 <= occ <= 1.0:
                    raise FormatError(f"frame {frame}: occlusion {occ} outside [0, 1]", path, offset)
                boxes.append(BoundingBox(x_t, y_t, x_b, y_b, occ))
            offset += len(raw)
    return boxes


def save_dataset(pairs: Sequence[SamplePair], dir_path, splits: Optional[Sequence[str]] = None,
                 extra_meta: Optional[dict] = None) -> None:
    root = Path(dir_path)
    for sub in ("rgb", "thermal", "ann"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    splits = list(splits) if splits is not None else ["train"] * len(pairs)
    frames = []
    for i, (pair, split) in enumerate(zip(pairs, splits)):
        fid = f"{i:06d}"
        _write_pnm(root / "rgb" / f"{fid}.ppm", pair.rgb)
        _write_pnm(root / "thermal" / f"{fid}.pgm", pair.thermal)
        (root / "ann" / f"{fid}.txt").write_text(_format_ann(pair.boxes))
        frames.append({"id": fid, "split": split, "time_of_day": pair.time_of_day,
                       "shift": [float(pair.shift[0]), float(pair.shift[1])]})
    meta = {"frames": frames}
    if extra_meta:
        meta.update(extra_meta)
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_dataset(dir_path, split: Optional[str] = None) -> List[SamplePair]:
    return [pair for _, pair in load_frames(dir_path, split)]


def load_frames(dir_path, split: Optional[str] = None) -> List[tuple]:
    """(frame_id, SamplePair) for every frame of ``split`` (all frames when None)."""
    root = Path(dir_path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FormatError("missing meta.json", meta_path)
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"meta.json is not valid JSON: {exc.msg}", meta_path, exc.pos) from None
    pairs = []
    for frame in meta.get("frames", []):
        if split is not None and frame.get("split") != split:
            continue
        fid = frame["id"]
        rgb_path = root / "rgb" / f"{fid}.ppm"
        th_path = root / "thermal" / f"{fid}.pgm"
        if not rgb_path.exists():
            raise MissingModalityError(f"frame {fid}: missing RGB image {rgb_path}")
        if not th_path.exists():
            raise MissingModalityError(f"frame {fid}: missing thermal image {th_path}")
        rgb = _read_pnm(rgb_path, 3)
        thermal = _read_pnm(th_path, 1)
        if rgb.shape[1:] != thermal.shape[1:]:
            raise FormatError(f"frame {fid}: modality sizes differ", th_path)
        ann_path = root / "ann" / f"{fid}.txt"
        boxes = _parse_ann(ann_path, fid) if ann_path.exists() else []
        pairs.append((fid, SamplePair(rgb=rgb, thermal=thermal, boxes=boxes,
                                      time_of_day=frame.get("time_of_day", "day"),
                                      shift=tuple(float(v) for v in frame.get("shift", (0.0, 0.0))))))
    return pairs


def dataset_meta(dir_path) -> dict:
    return json.loads((Path(dir_path) / "meta.json").read_text())
