"""Flat-file run configuration: parsing, validation, hashing."""

import dataclasses

import pytest

from xbl.config import (RunConfig, canonical_text, config_hash, parse_config,
                        parse_config_text, run_id)
from xbl.errors import ConfigError


def test_defaults_construct_and_convert():
    cfg = RunConfig()
    spec = cfg.decoy_spec()
    model = cfg.model_config()
    assert spec.num_classes == model.num_classes == 4
    assert spec.image_size == model.image_size == 32
    assert cfg.lr == 1e-4
    assert cfg.epochs_unrefined == 60
    assert cfg.epochs_refine == 100
    assert cfg.early_stop_patience == 5
    assert cfg.margin == 1.0
    assert cfg.tau == 5.0


def test_canonical_text_round_trips():
    cfg = RunConfig(seed=3, conv_channels=(4, 8), loss_mode="exbl",
                    output_dir="runs/x")
    assert parse_config_text(canonical_text(cfg)) == cfg


def test_parse_ignores_comments_and_blanks():
    cfg = parse_config_text(
        "# a comment\n\nseed = 9\nlr = 2e-4  # trailing note\n")
    assert cfg.seed == 9
    assert cfg.lr == 2e-4


def test_parse_conv_channels_list():
    cfg = parse_config_text("conv_channels = 4, 8\nimage_size = 16\n"
                            "patch_size = 4\nbar_sigma_long = 3\n")
    assert cfg.conv_channels == (4, 8)


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("learning_rate = 1e-4\n")


def test_malformed_line_is_an_error():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("seed 9\n")


def test_bad_value_type_is_an_error():
    with pytest.raises(ConfigError, match="seed"):
        parse_config_text("seed = fast\n")


def test_missing_file_is_an_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.cfg")


def test_overrides_win(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\n")
    assert parse_config(path, {"seed": 7}).seed == 7


@pytest.mark.parametrize("kwargs", [
    {"loss_mode": "triplet"},
    {"lr": 0.0},
    {"lr": -1e-4},
    {"tau": 0.0},
    {"tau": 100.0},
    {"adam_beta1": 1.0},
    {"batch_size": 0},
    {"early_stop_patience": 0},
    {"lr_decay_factor": 0.0},
    {"freeze_prefix": 4},
    {"margin": -0.5},
    {"image_size": 16, "patch_size": 6},   # patch too big for the image
    {"conv_channels": ()},
    {"output_dir": ""},
])
def test_invalid_configs_are_rejected(kwargs):
    with pytest.raises(ConfigError):
        RunConfig(**kwargs)


def test_hash_ignores_output_dir_only():
    a = RunConfig(output_dir="runs/a")
    b = RunConfig(output_dir="runs/b")
    assert config_hash(a) == config_hash(b)
    assert run_id(a) == run_id(b)
    for change in ({"seed": 1}, {"lr": 2e-4}, {"loss_mode": "exbl"},
                   {"patch_size": 4}):
        other = dataclasses.replace(a, **change)
        assert config_hash(other) != config_hash(a), change


def test_run_id_is_short_and_stable():
    cfg = RunConfig()
    assert run_id(cfg) == run_id(RunConfig())
    assert len(run_id(cfg)) == 12
    assert all(c in "0123456789abcdef" for c in run_id(cfg))
