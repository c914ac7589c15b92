"""
Tests for experiment configuration loading and validation
"""

import json
from pathlib import Path

import pytest

from config import (ExperimentConfig, apply_overrides, configure_threads, load_config, output_root,
                    save_config)
from errors import ConfigurationError

CONFIG_DIR = Path(__file__).parent / "configs"


def test_defaults_are_the_desk_benchmark():
    config = load_config()
    assert config.variant == "none"
    assert config.dataset.num_classes == 4
    assert config.mixing_strategy == "classmix"
    assert config.training.tau == pytest.approx(0.968)
    assert config.dacal.mtn_ema_gamma == pytest.approx(0.999)
    assert config.warmup_iterations == 250


def test_biomedical_preset_uses_cutmix():
    config = ExperimentConfig.from_dict({"dataset": {"preset": "biomedical"}})
    assert config.dataset.num_classes == 2
    assert config.dataset.shape_kinds == ["blob"]
    assert config.mixing_strategy == "cutmix"
    assert config.evaluation.exclude_classes == [0]
    assert ExperimentConfig().evaluation.exclude_classes == []


def test_auto_mixing_follows_class_count():
    config = ExperimentConfig.from_dict({"dataset": {"num_classes": 2}})
    assert config.mixing_strategy == "cutmix"


@pytest.mark.parametrize("data", [
    {"dataset": {"num_classes": 1}},
    {"variant": "XY"},
    {"unknown": 1},
    {"dacal": {"gamma": 0.5}},
    {"training": {"tau": 1.5}},
    {"iterations": "many"},
    {"dataset": {"preset": "aerial"}},
    {"dataset": {"target_domain": {"brightness": 0.0}}},
    {"evaluation": {"exclude_classes": [4]}},
    {"evaluation": {"exclude_classes": [0, 1, 2, 3]}},
    {"evaluation": {"exclude_classes": "0"}},
])
def test_invalid_configs_are_rejected(data):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(data)


def test_partial_domain_override_keeps_other_values():
    config = ExperimentConfig.from_dict({"dataset": {"target_domain": {"noise_sigma": 0.2}}})
    assert config.dataset.target_domain["noise_sigma"] == pytest.approx(0.2)
    assert config.dataset.target_domain["brightness"] == pytest.approx(0.8)


def test_overrides_return_a_new_config():
    base = load_config()
    changed = apply_overrides(base, {"dacal.alpha": 0.05, "seed": 3})
    assert changed.dacal.alpha == pytest.approx(0.05) and changed.seed == 3
    assert base.dacal.alpha == pytest.approx(0.01)
    assert changed.config_hash() != base.config_hash()
    with pytest.raises(ConfigurationError):
        apply_overrides(base, {"dacal.nope": 1})


def test_hash_is_stable_across_save_and_load(tmp_path):
    config = ExperimentConfig.from_dict({"variant": "PH", "seed": 2})
    path = save_config(config, tmp_path / "config.json")
    assert load_config(str(path)).config_hash() == config.config_hash()


def test_load_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(str(broken))


def test_shipped_configs_load():
    for name in ("desk_noadapt", "desk_baseline", "desk_ph", "desk_bi", "biomedical_ph"):
        load_config(str(CONFIG_DIR / f"{name}.json"))
    with open(CONFIG_DIR / "desk_bi.json", "r", encoding="utf-8") as f:
        assert json.load(f)["variant"] == "BI"


def test_environment_settings(monkeypatch, mocker):
    monkeypatch.setenv("DACAL_OUTPUT_ROOT", "/tmp/elsewhere")
    assert str(output_root()) == "/tmp/elsewhere"
    monkeypatch.delenv("DACAL_OUTPUT_ROOT")
    assert str(output_root()) == "runs"

    set_threads = mocker.patch("torch.set_num_threads")
    monkeypatch.setenv("DACAL_NUM_THREADS", "2")
    assert configure_threads() == 2
    set_threads.assert_called_once_with(2)
    monkeypatch.setenv("DACAL_NUM_THREADS", "zero")
    with pytest.raises(ConfigurationError):
        configure_threads()
