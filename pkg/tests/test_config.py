import json

import pytest
import yaml

from gaitscale.config import ConfigValidationError, ExperimentConfig, config_from_dict, desk_config, parse_config
from gaitscale.data import write_dataset, generate_synthetic_dataset


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("")
    assert parse_config(tmp_path / "c.yaml") == ExperimentConfig()


def test_width_three_accepted():
    cfg = config_from_dict({"model": {"width_multiplier": 3, "base_stage_heads": [2, 2, 4, 8],
                                      "base_stage_widths": [64, 64, 128, 256]}})
    assert cfg.model.stage_heads == (6, 6, 12, 24)


def test_bad_width_names_key():
    with pytest.raises(ConfigValidationError) as err:
        config_from_dict({"model": {"base_stage_widths": [30, 64, 128, 256], "base_stage_heads": [4, 2, 4, 8]}})
    assert err.value.key == "model.base_stage_widths[0]"
    with pytest.raises(ConfigValidationError) as err:
        config_from_dict({"sweep": {"widths": [1, 0]}})
    assert err.value.key == "sweep.widths[1]"


def test_round_trip(tmp_path):
    cfg = desk_config(seed=7)
    (tmp_path / "c.yaml").write_text(cfg.to_yaml())
    assert parse_config(tmp_path / "c.yaml") == cfg
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert parse_config(tmp_path / "c.json") == cfg


def test_unknown_and_mistyped_keys():
    with pytest.raises(ConfigValidationError, match="train.lr"):
        config_from_dict({"train": {"lr": 0.1}})
    with pytest.raises(ConfigValidationError, match="^models"):
        config_from_dict({"models": {}})
    with pytest.raises(ConfigValidationError, match="train.epochs"):
        config_from_dict({"train": {"epochs": "many"}})
    with pytest.raises(ConfigValidationError, match="train.seed"):
        config_from_dict({"train": {"seed": 3}})


def test_exponent_strings_accepted():
    cfg = config_from_dict(yaml.safe_load("train:\n  adam_eps: 1e-08\n"))
    assert cfg.train.adam_eps == 1e-8


def test_seed_propagates():
    cfg = config_from_dict({"seed": 11})
    assert cfg.train.seed == 11
    assert cfg.with_seed(3).train.seed == 3


def test_crop_length_tied_to_model():
    cfg = config_from_dict({"model": {"crop_length": 40}})
    assert cfg.augmentation.crop_length == 40
    with pytest.raises(ConfigValidationError, match="augmentation.crop_length"):
        config_from_dict({"model": {"crop_length": 40}, "augmentation": {"crop_length": 48}})


def test_dataset_paths_resolve(tmp_path):
    write_dataset(generate_synthetic_dataset(2, 2, 0), tmp_path / "train.gsk")
    (tmp_path / "c.yaml").write_text("data:\n  train_path: train.gsk\n")
    cfg = parse_config(tmp_path / "c.yaml")
    assert cfg.data.train_path == str((tmp_path / "train.gsk").resolve())
    (tmp_path / "bad.yaml").write_text("data:\n  eval_path: missing.gsk\n")
    with pytest.raises(ConfigValidationError, match="data.eval_path"):
        parse_config(tmp_path / "bad.yaml")


def test_manifest_is_a_config(tmp_path):
    cfg = desk_config(seed=2)
    (tmp_path / "m.json").write_text(json.dumps({"manifest_version": 1, "config": cfg.to_dict()}))
    assert parse_config(tmp_path / "m.json") == cfg


def test_packaged_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.yaml")):
        parse_config(path)
    assert parse_config(root / "desk.yaml") == desk_config()
