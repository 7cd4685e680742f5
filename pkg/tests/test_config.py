# -*- coding: utf-8 -*-
from pathlib import Path

import pytest

from core.config import (
    OUT_DIR_ENV,
    apply_overrides,
    config_hash,
    default_out_dir,
    dump_config,
    parse_config,
    parse_config_text,
    parse_value,
    validate_config,
)
from core.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "data" / "configs"


def _write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return path


def test_minimal_config_fills_defaults(tmp_path):
    config = parse_config(_write(tmp_path, "method = mvc-zigal\n"))
    assert config.method == "mvc-zigal"
    assert (config.views, config.steps, config.batch_size, config.epochs) == (4, 4, 8, 50)
    assert config.max_grad_norm == 5.0
    assert config.adam_betas == (0.9, 0.999)
    assert config.controller.lambda_max == 5.0
    assert config.controller.beta_tau == 0.99
    assert (config.guidance.omega_high, config.guidance.omega_low) == (7.0, 1.0)
    assert config.zigzag.mode == "first-step"
    assert config.objective.prob_floor == 1e-4


def test_guidance_scales_key(tmp_path):
    config = parse_config(_write(tmp_path, "guidance.scales = (5.0, 0.5)  # high, low\n"))
    assert (config.guidance.omega_high, config.guidance.omega_low) == (5.0, 0.5)


def test_misspelled_key_is_named(tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config(_write(tmp_path, "controller.lamda_max = 3.0\n"))
    assert info.value.key == "controller.lamda_max"
    assert "controller.lamda_max" in str(info.value)


@pytest.mark.parametrize("text, key", [
    ("learning_rate = -1\n", "learning_rate"),
    ("views = many\n", "views"),
    ("method = ppo\n", "method"),
    ("steps = 17\n", "steps"),
    ("steps = 3\nzigzag.mode = explicit\nzigzag.steps = [4]\n", "<root>"),
])
def test_invalid_values_report_key_path(tmp_path, text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(_write(tmp_path, text))
    assert info.value.key == key


def test_syntax_errors():
    with pytest.raises(ConfigError):
        parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError):
        parse_config_text("just words\n")
    with pytest.raises(ConfigError):
        parse_config_text("seed = 1\nseed.inner = 2\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.cfg")


def test_parse_value_forms():
    assert parse_value("1e-3") == 0.001
    assert parse_value("false") is False
    assert parse_value("(0.9, 0.999)") == [0.9, 0.999]
    assert parse_value("1, 2") == [1, 2]
    assert parse_value("first-step") == "first-step"
    assert parse_value("()") == []


def test_dump_round_trip_preserves_hash():
    config = validate_config({"method": "ws-zigal", "objective": {"w_mv": 0.1}, "checkpoint": "a.json"})
    again = validate_config(parse_config_text(dump_config(config)))
    assert again == config
    assert config_hash(again) == config_hash(config)


def test_overrides():
    config = validate_config({})
    assert apply_overrides(config, seed=None) is config
    changed = apply_overrides(config, seed=7, method="zigal")
    assert (changed.seed, changed.method) == (7, "zigal")
    assert config_hash(changed) != config_hash(config)
    assert len(config_hash(config)) == 12
    with pytest.raises(ConfigError):
        apply_overrides(config, method="unknown")


def test_default_out_dir(monkeypatch):
    monkeypatch.delenv(OUT_DIR_ENV, raising=False)
    assert default_out_dir() == Path("./runs")
    monkeypatch.setenv(OUT_DIR_ENV, "/tmp/mvlab")
    assert default_out_dir() == Path("/tmp/mvlab")
    assert default_out_dir("explicit") == Path("explicit")


@pytest.mark.parametrize("name", ["default.cfg", "smoke.cfg", "tradeoff.cfg", "fixed_tau.cfg", "fixed_alpha.cfg"])
def test_shipped_configs_parse(name):
    config = parse_config(CONFIG_DIR / name)
    assert config.method == "mvc-zigal"


def test_reproduction_configs_share_the_toy_setup():
    tradeoff = parse_config(CONFIG_DIR / "tradeoff.cfg")
    assert (tradeoff.guidance.omega_high, tradeoff.guidance.omega_low) == (1.5, 1.0)
    assert tradeoff.model.gamma == 1.0
    for name in ("fixed_tau.cfg", "fixed_alpha.cfg"):
        ablation = parse_config(CONFIG_DIR / name)
        assert ablation.guidance == tradeoff.guidance
        assert ablation.model == tradeoff.model
        assert ablation.learning_rate == tradeoff.learning_rate
        assert ablation.batches_per_epoch == tradeoff.batches_per_epoch


def test_default_config_lists_every_default():
    assert parse_config(CONFIG_DIR / "default.cfg") == validate_config({})
