"""Fixed-seed synthetic benchmark for modality and fusion-depth comparisons.

Every variant trains from the same dataset for the same number of steps;
only the run seed (initialisation, sample order and augmentation draws)
changes between repeats.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

from multifuse.config import RunConfig
from multifuse.data import SamplePair, synthesize
from multifuse.model import MultimodalDetector
from multifuse.train import TrainOptions, evaluate, train

log = logging.getLogger(__name__)


@dataclass
class Variant:
    name: str
    mode: str = "multimodal"
    n_fusion_units: Optional[int] = None


DEFAULT_VARIANTS = (
    Variant("multimodal"),
    Variant("visible", mode="visible"),
    Variant("thermal", mode="thermal"),
    Variant("fusion1", n_fusion_units=1),
)


@dataclass
class BenchmarkResult:
    steps: int
    seeds: List[int]
    # variant -> split -> per-seed MR
    mr: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)
    seconds: float = 0.0

    def median(self, variant: str, split: str = "night") -> float:
        return statistics.median(self.mr[variant][split])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def benchmark_data(cfg: RunConfig, n_train: int = 200, n_test: int = 50, seed: int = 0) -> tuple:
    frames = synthesize(cfg.data.scene_spec(), {"train": n_train, "test": n_test},
                        night_fraction=cfg.data.night_fraction,
                        night_illumination=cfg.data.night_illumination, seed=seed)
    split = {"train": [], "test": []}
    for name, _, pair in frames:
        split[name].append(pair)
    return split["train"], split["test"]


def run_variant(cfg: RunConfig, variant: Variant, train_set: Sequence[SamplePair],
                test_set: Sequence[SamplePair], steps: int, seed: int, **train_overrides) -> dict:
    model_cfg = cfg.model
    if variant.n_fusion_units is not None:
        model_cfg = replace(model_cfg, n_fusion_units=variant.n_fusion_units)
    model = MultimodalDetector(model_cfg, seed=seed)
    opts = TrainOptions.from_config(cfg.train, steps=steps, seed=seed, mode=variant.mode, checkpoint_every=0,
                                   **train_overrides)
    train(model, train_set, opts)
    report = evaluate(model, test_set, cfg.eval, mode=variant.mode, detect=cfg.detect)
    return {k: (float("nan") if s is None else s.mr) for k, s in report.splits.items()}


def run_benchmark(cfg: RunConfig, steps: int, seeds: Sequence[int] = (0, 1, 2),
                  variants: Sequence[Variant] = DEFAULT_VARIANTS, data_seed: int = 0,
                  n_train: int = 200, n_test: int = 50, **train_overrides) -> BenchmarkResult:
    """Train every variant once per seed and record its test miss rate per split.

    ``train_overrides`` are applied to the training options of every run,
    e.g. ``simple_augment=False``.
    """
    t0 = time.perf_counter()
    train_set, test_set = benchmark_data(cfg, n_train, n_test, data_seed)
    result = BenchmarkResult(steps=steps, seeds=list(seeds))
    for v in variants:
        per_split: Dict[str, List[float]] = {}
        for s in seeds:
            for split, mr in run_variant(cfg, v, train_set, test_set, steps, s, **train_overrides).items():
                per_split.setdefault(split, []).append(mr)
            log.info("%s seed %d: %s", v.name, s, {k: vals[-1] for k, vals in per_split.items()})
        result.mr[v.name] = per_split
    result.seconds = time.perf_counter() - t0
    return result
