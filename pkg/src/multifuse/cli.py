"""Command-line entry point: ``multifuse {synth|train|eval|infer|gradcheck|confcal}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy import ndimage

from multifuse.checkpoint import load_model, save_model
from multifuse.config import RunConfig, load_config, shipped_config
from multifuse.confidence import ConfidenceHead, confidence_report, train_confidence
from multifuse.data import SamplePair, load_frames, save_dataset, synthesize, _read_pnm
from multifuse.detector import write_detections
from multifuse.errors import ChecksumError, ConfigError, FormatError, MissingModalityError, NumericError
from multifuse.gradsuite import format_table, run_suite
from multifuse.model import MultimodalDetector
from multifuse.train import MODES, TrainOptions, evaluate, make_target, modality_inputs, predict, train

log = logging.getLogger("multifuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 1, 2, 3, 4
CONF_PREFIX = "confidence."


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON); defaults to the shipped default.json")
    common.add_argument("--seed", type=int, help="overrides data.seed and train.seed")
    common.add_argument("--mode", choices=MODES, default="multimodal")
    common.add_argument("--train-mode", action="store_true",
                        help="eval: retrain a model with the chosen modality before evaluating it")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="multifuse", description="RGB + thermal pedestrian detection")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", help="dataset directory (default: io.dataset_dir)")

    t = sub.add_parser("train", parents=[common], help="train a detector")
    t.add_argument("--dataset")
    t.add_argument("--checkpoint")
    t.add_argument("--steps", type=int)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--out", help="report path (default: <output_dir>/eval_<mode>_<split>.txt)")

    i = sub.add_parser("infer", parents=[common], help="detect pedestrians in image pairs")
    i.add_argument("--checkpoint")
    i.add_argument("--pair", nargs=2, action="append", metavar=("RGB", "THERMAL"), default=[],
                   help="RGB .ppm and thermal .pgm; repeatable")
    i.add_argument("--dataset", help="run on every frame of a dataset directory instead")
    i.add_argument("--split")
    i.add_argument("--out", required=True)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every block")

    c = sub.add_parser("confcal", parents=[common], help="train the confidence head and report bins")
    c.add_argument("--dataset")
    c.add_argument("--checkpoint")
    c.add_argument("--out", help="checkpoint to write (default: <checkpoint>.conf.mmpd)")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config or shipped_config("default"))
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _path(cfg: RunConfig, override: Optional[str], default: str) -> Path:
    return Path(override) if override else cfg.resolve(default)


def _output_dir(cfg: RunConfig) -> Path:
    out = cfg.resolve(cfg.io.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model(cfg: RunConfig) -> MultimodalDetector:
    return MultimodalDetector(cfg.model, seed=cfg.train.seed)


def _frames(cfg: RunConfig, dataset: Optional[str], split: Optional[str]) -> List[tuple]:
    root = _path(cfg, dataset, cfg.io.dataset_dir)
    return load_frames(root, split)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, out: Optional[str] = None) -> Path:
    root = _path(cfg, out, cfg.io.dataset_dir)
    n_train, n_val, n_test = cfg.data.split_counts()
    spec = cfg.data.scene_spec()
    frames = synthesize(spec, {"train": n_train, "val": n_val, "test": n_test}, cfg.data.night_fraction,
                        cfg.data.night_illumination, cfg.data.seed)
    meta = {
        "scene_spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()
                       if k not in ("illumination", "seed")},
        "night_illumination": cfg.data.night_illumination,
        "night_fraction": cfg.data.night_fraction,
        "seed": cfg.data.seed,
        "frame_seeds": [s for _, s, _ in frames],
    }
    save_dataset([p for _, _, p in frames], root, [sp for sp, _, _ in frames], extra_meta=meta)
    log.info("wrote %d frames (%d/%d/%d) to %s", len(frames), n_train, n_val, n_test, root)
    return root


def _train_model(cfg: RunConfig, pairs: List[SamplePair], mode: str, ckpt: Path, steps: Optional[int] = None):
    model = _model(cfg)
    log_path = _output_dir(cfg) / f"train_{mode}.jsonl"
    opts = TrainOptions.from_config(cfg.train, mode=mode, checkpoint_path=str(ckpt), log_path=str(log_path))
    if steps is not None:
        opts.steps = steps
    history = train(model, pairs, opts)
    log.info("trained %d steps in %.1fs, final loss %.4f", len(history.losses), history.seconds,
             history.losses[-1] if history.losses else float("nan"))
    return model, history


def cmd_train(cfg: RunConfig, mode: str = "multimodal", dataset: Optional[str] = None,
              checkpoint: Optional[str] = None, steps: Optional[int] = None):
    pairs = [p for _, p in _frames(cfg, dataset, "train")]
    if not pairs:
        raise FormatError("dataset has no training frames", _path(cfg, dataset, cfg.io.dataset_dir))
    ckpt = _path(cfg, checkpoint, cfg.io.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    return _train_model(cfg, pairs, mode, ckpt, steps)


def cmd_eval(cfg: RunConfig, mode: str = "multimodal", dataset: Optional[str] = None,
             checkpoint: Optional[str] = None, split: str = "test", train_mode: bool = False,
             out: Optional[str] = None):
    frames = _frames(cfg, dataset, split)
    if not frames:
        raise FormatError(f"dataset has no {split!r} frames", _path(cfg, dataset, cfg.io.dataset_dir))
    ckpt = _path(cfg, checkpoint, cfg.io.checkpoint)
    if train_mode:
        retrained = ckpt.with_name(f"{ckpt.stem}.{mode}{ckpt.suffix}")
        pairs = [p for _, p in _frames(cfg, dataset, "train")]
        model, _ = _train_model(cfg, pairs, mode, retrained)
    else:
        model = _model(cfg)
        load_model(ckpt, model)
    report = evaluate(model, [p for _, p in frames], cfg.eval, mode, cfg.detect)
    path = Path(out) if out else _output_dir(cfg) / f"eval_{mode}_{split}.txt"
    path.write_text(f"mode {mode}\nsplit {split}\n" + report.to_text())
    path.with_suffix(".csv").write_text(report.curve_csv())
    return report, path


def _resize(img: np.ndarray, size: tuple) -> np.ndarray:
    H, W = size
    if img.shape[1:] == (H, W):
        return img
    zoom = (1.0, H / img.shape[1], W / img.shape[2])
    return np.clip(ndimage.zoom(img, zoom, order=1), 0.0, 1.0).astype(np.float32)


def _split_confidence(tensors: "OrderedDict[str, np.ndarray]"):
    return OrderedDict((k[len(CONF_PREFIX):], v) for k, v in tensors.items() if k.startswith(CONF_PREFIX))


def _confidence_head(cfg: RunConfig, model: MultimodalDetector, rng_seed: int = 0) -> ConfidenceHead:
    return ConfidenceHead(model.scofa.out_channels, np.random.default_rng(rng_seed), cfg.confidence.hidden,
                          model.decoder.upsample_factor)


def cmd_infer(cfg: RunConfig, out: str, pairs: Optional[list] = None, dataset: Optional[str] = None,
              split: Optional[str] = None, checkpoint: Optional[str] = None, mode: str = "multimodal") -> int:
    ckpt = _path(cfg, checkpoint, cfg.io.checkpoint)
    model = _model(cfg)
    extra = load_model(ckpt, model)
    head = None
    conf = _split_confidence(extra)
    if conf:
        head = _confidence_head(cfg, model)
        head.load_state_dict(conf)
    inputs = []
    if dataset:
        inputs = load_frames(dataset, split)
    for rgb_path, th_path in pairs or []:
        rgb = _resize(_read_pnm(Path(rgb_path), 3), tuple(cfg.data.size))
        if not Path(th_path).exists():
            raise MissingModalityError(f"missing thermal image {th_path}")
        thermal = _resize(_read_pnm(Path(th_path), 1), tuple(cfg.data.size))
        inputs.append((Path(rgb_path).stem, SamplePair(rgb, thermal, [])))
    results = [(fid, predict(model, pair, mode, cfg.detect, head)) for fid, pair in inputs]
    write_detections(out, results)
    return sum(len(d) for _, d in results)


def cmd_gradcheck() -> tuple:
    rows = run_suite()
    return rows, format_table(rows)


def cmd_confcal(cfg: RunConfig, dataset: Optional[str] = None, checkpoint: Optional[str] = None,
                out: Optional[str] = None, mode: str = "multimodal"):
    ckpt = _path(cfg, checkpoint, cfg.io.checkpoint)
    model = _model(cfg)
    load_model(ckpt, model)
    before = model.checksum()
    train_frames = _frames(cfg, dataset, "train")
    val_frames = _frames(cfg, dataset, "val")
    if not train_frames or not val_frames:
        raise FormatError("confidence calibration needs train and val frames", _path(cfg, dataset, cfg.io.dataset_dir))
    samples = []
    for _, pair in train_frames:
        rgb, thermal = modality_inputs(pair, mode)
        samples.append((rgb.data, thermal.data, make_target(pair, model)))
    head = _confidence_head(cfg, model, cfg.train.seed)
    history = train_confidence(head, model, samples, cfg.confidence.epochs, cfg.confidence.lr,
                               cfg.confidence.momentum, seed=cfg.train.seed)
    if model.checksum() != before:
        raise NumericError("detector weights changed during confidence training")
    report_frames = [(predict(model, pair, mode, cfg.detect, head), pair.boxes) for _, pair in val_frames]
    bins = confidence_report(report_frames, cfg.confidence.iou_match)
    target = Path(out) if out else ckpt.with_name(f"{ckpt.stem}.conf{ckpt.suffix}")
    save_model(target, model, OrderedDict((CONF_PREFIX + k, v) for k, v in head.state_dict().items()))
    table = _output_dir(cfg) / "confidence_bins.txt"
    table.write_text(bins.to_table())
    return bins, history, target


# ---------------------------------------------------------------- entry point


def _run(args) -> int:
    if args.command == "gradcheck":
        rows, table = cmd_gradcheck()
        print(table, end="")
        return EXIT_OK if all(r.passed for r in rows) else EXIT_ACCEPTANCE
    cfg = _config(args)
    if args.command == "synth":
        root = cmd_synth(cfg, args.out)
        print(f"dataset written to {root}")
    elif args.command == "train":
        model, history = cmd_train(cfg, args.mode, args.dataset, args.checkpoint, args.steps)
        print(f"steps {len(history.losses)} final_loss {history.losses[-1]:.6f} seconds {history.seconds:.1f}")
    elif args.command == "eval":
        report, path = cmd_eval(cfg, args.mode, args.dataset, args.checkpoint, args.split, args.train_mode,
                                args.out)
        print(report.to_text(), end="")
    elif args.command == "infer":
        if not args.pair and not args.dataset:
            raise UsageError("infer needs --pair RGB THERMAL or --dataset DIR")
        n = cmd_infer(cfg, args.out, args.pair, args.dataset, args.split, args.checkpoint, args.mode)
        print(f"{n} detections written to {args.out}")
    elif args.command == "confcal":
        bins, _, target = cmd_confcal(cfg, args.dataset, args.checkpoint, args.out, args.mode)
        print(bins.to_table(), end="")
        print(f"checkpoint with confidence head written to {target}")
    return EXIT_OK


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except (UsageError, ConfigError) as exc:
        print(f"multifuse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"multifuse: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ChecksumError, MissingModalityError, FileNotFoundError, IsADirectoryError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"multifuse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
