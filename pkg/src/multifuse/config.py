"""Run configuration: one JSON document with model / train / eval / data / confidence / io sections.

Keys starting with ``_`` are comments and are ignored on load.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from multifuse.errors import ConfigError
from multifuse.metrics import EvalConfig
from multifuse.model import ModelConfig

CONFIG_DIR = Path(__file__).parent / "configs"


@dataclass
class TrainConfig:
    lambda_g: float = 1.0
    base_lr: float = 0.01
    momentum: float = 0.9
    lr_period: int = 5000
    steps: int = 2000
    batch_size: int = 1
    grad_accumulation: int = 1
    simple_augment: bool = True
    augment_p: float = 0.3
    augment_scale: tuple = (0.8, 1.2)
    augment_photometric: bool = True
    mixup: bool = True
    mixup_alpha: float = 0.2
    mixup_prob: float = 0.5
    curriculum: bool = True
    curriculum_max: float = 0.7
    curriculum_ramp: float = 0.8
    grad_clip: Optional[float] = None
    checkpoint_every: int = 500
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.lambda_g <= 1.0:
            raise ConfigError(f"train.lambda_g must lie in [0, 1], got {self.lambda_g}")
        if self.base_lr <= 0:
            raise ConfigError(f"train.base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"train.momentum must lie in [0, 1), got {self.momentum}")
        if self.lr_period < 1:
            raise ConfigError(f"train.lr_period must be >= 1, got {self.lr_period}")
        if self.steps < 0:
            raise ConfigError(f"train.steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.grad_accumulation < 1:
            raise ConfigError(f"train.grad_accumulation must be >= 1, got {self.grad_accumulation}")
        if not 0.0 <= self.augment_p <= 1.0:
            raise ConfigError(f"train.augment_p must lie in [0, 1], got {self.augment_p}")
        if len(self.augment_scale) != 2 or not 0 < self.augment_scale[0] <= self.augment_scale[1]:
            raise ConfigError(f"train.augment_scale must be [lo, hi] with 0 < lo <= hi, got {self.augment_scale}")
        if self.mixup_alpha <= 0:
            raise ConfigError(f"train.mixup_alpha must be positive, got {self.mixup_alpha}")
        if not 0.0 <= self.mixup_prob <= 1.0:
            raise ConfigError(f"train.mixup_prob must lie in [0, 1], got {self.mixup_prob}")
        if not 0.0 <= self.curriculum_max < 1.0:
            raise ConfigError(f"train.curriculum_max must lie in [0, 1), got {self.curriculum_max}")
        if not 0.0 < self.curriculum_ramp <= 1.0:
            raise ConfigError(f"train.curriculum_ramp must lie in (0, 1], got {self.curriculum_ramp}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"train.grad_clip must be positive when set, got {self.grad_clip}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"train.checkpoint_every must be >= 1, got {self.checkpoint_every}")


@dataclass
class DataConfig:
    size: tuple = (64, 64)
    frames: int = 100
    split: tuple = (0.8, 0.1, 0.1)
    night_fraction: float = 0.5
    night_illumination: float = 0.08
    pedestrians: tuple = (0, 3)
    height: tuple = (18.0, 40.0)
    shift: tuple = (0, 2)
    occlusion_prob: float = 0.2
    noise_rgb: float = 0.02
    noise_thermal: float = 0.02
    max_overlap: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.frames < 1:
            raise ConfigError(f"data.frames must be >= 1, got {self.frames}")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"data.split must be three non-negative fractions summing to 1, got {self.split}")
        if not 0.0 <= self.night_fraction <= 1.0:
            raise ConfigError(f"data.night_fraction must lie in [0, 1], got {self.night_fraction}")
        if not 0.0 < self.night_illumination < 0.5:
            raise ConfigError(f"data.night_illumination must lie in (0, 0.5), got {self.night_illumination}")
        try:
            self.scene_spec().validate()
        except ConfigError as exc:
            raise ConfigError(str(exc).replace("scene.", "data.")) from None

    def scene_spec(self):
        from multifuse.data import SceneSpec

        return SceneSpec(size=tuple(self.size), pedestrians=tuple(self.pedestrians), height=tuple(self.height),
                         shift=tuple(self.shift), occlusion_prob=self.occlusion_prob, noise_rgb=self.noise_rgb,
                         noise_thermal=self.noise_thermal, max_overlap=self.max_overlap)

    def split_counts(self) -> tuple:
        n_train = int(round(self.frames * self.split[0]))
        n_val = int(round(self.frames * self.split[1]))
        return n_train, n_val, self.frames - n_train - n_val


@dataclass
class ConfidenceConfig:
    hidden: int = 16
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    iou_match: float = 0.5

    def validate(self) -> None:
        if self.hidden < 1:
            raise ConfigError(f"confidence.hidden must be >= 1, got {self.hidden}")
        if self.epochs < 0:
            raise ConfigError(f"confidence.epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"confidence.lr must be positive, got {self.lr}")
        if not 0.0 < self.iou_match < 1.0:
            raise ConfigError(f"confidence.iou_match must lie in (0, 1), got {self.iou_match}")


@dataclass
class DetectConfig:
    score_thresh: float = 0.05
    nms_iou: float = 0.3
    max_candidates: int = 400
    min_inside: Optional[float] = 0.8  # fraction of a box that must lie inside the image

    def validate(self) -> None:
        if not 0.0 < self.score_thresh < 1.0:
            raise ConfigError(f"detect.score_thresh must lie in (0, 1), got {self.score_thresh}")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigError(f"detect.nms_iou must lie in (0, 1), got {self.nms_iou}")
        if self.max_candidates < 1:
            raise ConfigError(f"detect.max_candidates must be >= 1, got {self.max_candidates}")
        if self.min_inside is not None and not 0.0 <= self.min_inside <= 1.0:
            raise ConfigError(f"detect.min_inside must lie in [0, 1], got {self.min_inside}")


@dataclass
class IoConfig:
    dataset_dir: str = "data"
    checkpoint: str = "model.mmpd"
    output_dir: str = "runs"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    data: DataConfig = field(default_factory=DataConfig)
    confidence: ConfidenceConfig = field(default_factory=ConfidenceConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def validate(self) -> "RunConfig":
        try:
            self.model.validate()
        except ConfigError as exc:
            msg = str(exc)
            raise ConfigError(msg if msg.startswith("model.") else f"model.{msg}") from None
        for section in (self.train, self.eval, self.detect, self.data, self.confidence):
            section.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def resolve(self, path: str) -> Path:
        """IO paths are relative to the config file's directory when one was loaded."""
        p = Path(path)
        base = getattr(self, "_base_dir", None)
        return p if p.is_absolute() or base is None else base / p


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key.startswith("_"):
            continue
        name = f"{where}.{key}" if where else key
        if key not in fields:
            raise ConfigError(f"{name}: unknown field")
        default = getattr(cls(), key)
        if "Optional" in str(fields[key].type):
            if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigError(f"{name} must be a number or null, got {value!r}")
            kwargs[key] = None if value is None else float(value)
        elif dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, name)
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{name} must be a list, got {value!r}")
            kwargs[key] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name} must be true or false, got {value!r}")
            kwargs[key] = value
        elif isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
            kwargs[key] = value
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name} must be a number, got {value!r}")
            if isinstance(default, int):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    cfg = config_from_dict(data)
    cfg._base_dir = path.parent
    return cfg


def shipped_config(name: str = "default") -> Path:
    return CONFIG_DIR / f"{name}.json"
