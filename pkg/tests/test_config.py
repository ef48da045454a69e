import json

import pytest

from multifuse.config import RunConfig, config_from_dict, load_config, shipped_config
from multifuse.errors import ConfigError

OUT_OF_RANGE = [
    ({"model": {"n_fusion_units": 6}}, "model.n_fusion_units"),
    ({"model": {"n_fusion_units": 0}}, "model.n_fusion_units"),
    ({"model": {"gat_patch": 0}}, "model.gat_patch"),
    ({"model": {"encoder": {"widths": [16, 30, 64]}}}, "model.encoder.widths"),
    ({"model": {"encoder": {"norm_groups": 3}}}, "model.encoder.norm_groups"),
    ({"model": {"scofa": {"spatial": False, "contextual": False}}}, "spatial"),
    ({"model": {"scofa": {"crf_iterations": 0}}}, "model.scofa.crf_iterations"),
    ({"model": {"scofa": {"crf_damping": 1.5}}}, "model.scofa.crf_damping"),
    ({"model": {"scofa": {"irnn_channels": 0}}}, "model.scofa.irnn_channels"),
    ({"model": {"decoder": {"geometry_scale": 0}}}, "model.decoder.geometry_scale"),
    ({"train": {"lambda_g": 1.5}}, "train.lambda_g"),
    ({"train": {"lambda_g": -0.1}}, "train.lambda_g"),
    ({"train": {"base_lr": 0}}, "train.base_lr"),
    ({"train": {"momentum": 1.0}}, "train.momentum"),
    ({"train": {"lr_period": 0}}, "train.lr_period"),
    ({"train": {"batch_size": 0}}, "train.batch_size"),
    ({"train": {"augment_p": 2}}, "train.augment_p"),
    ({"train": {"mixup_alpha": 0}}, "train.mixup_alpha"),
    ({"train": {"curriculum_max": 1.0}}, "train.curriculum_max"),
    ({"train": {"grad_clip": -1}}, "train.grad_clip"),
    ({"eval": {"match_iou": 1.0}}, "eval.match_iou"),
    ({"eval": {"fppi_points": [0.5, 0.1]}}, "eval.fppi_points"),
    ({"detect": {"score_thresh": 0}}, "detect.score_thresh"),
    ({"detect": {"min_inside": 1.5}}, "detect.min_inside"),
    ({"data": {"frames": 0}}, "data.frames"),
    ({"data": {"split": [0.5, 0.5, 0.5]}}, "data.split"),
    ({"data": {"night_fraction": 1.2}}, "data.night_fraction"),
    ({"data": {"pedestrians": [3, 1]}}, "data.pedestrians"),
    ({"data": {"max_overlap": 2}}, "data.max_overlap"),
    ({"confidence": {"iou_match": 0}}, "confidence.iou_match"),
]


@pytest.mark.parametrize("data,field", OUT_OF_RANGE)
def test_rejects_naming_field(data, field):
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert field in str(info.value)


@pytest.mark.parametrize(
    "data,field",
    [
        ({"train": {"steps": 1.5}}, "train.steps"),
        ({"train": {"mixup": 1}}, "train.mixup"),
        ({"train": {"lambda_g": "high"}}, "train.lambda_g"),
        ({"train": {"bogus": 1}}, "train.bogus"),
        ({"data": {"size": 64}}, "data.size"),
        ({"model": []}, "model"),
    ],
)
def test_rejects_wrong_types(data, field):
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert field in str(info.value)


@pytest.mark.parametrize("name", ["default", "overfit"])
def test_shipped_configs_load(name):
    cfg = load_config(shipped_config(name))
    assert isinstance(cfg, RunConfig)


def test_default_hyperparameters():
    cfg = load_config(shipped_config())
    t = cfg.train
    assert (t.lambda_g, t.base_lr, t.momentum, t.batch_size) == (1.0, 0.01, 0.9, 1)
    assert cfg.model.n_fusion_units == 4
    assert cfg.model.scofa.spatial and cfg.model.scofa.contextual
    assert cfg.data.split_counts() == (80, 10, 10)


def test_comment_keys_ignored():
    cfg = config_from_dict({"_note": "x", "train": {"_why": "y", "steps": 3}})
    assert cfg.train.steps == 3


def test_round_trip_through_json():
    cfg = load_config(shipped_config())
    again = config_from_dict(json.loads(cfg.to_json()))
    assert again.to_dict() == cfg.to_dict()


def test_io_paths_relative_to_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"io": {"dataset_dir": "d"}}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.resolve(cfg.io.dataset_dir) == tmp_path / "d"


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{ nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
