import json

import pytest

from texiris.config import RunConfig
from texiris.errors import ConfigurationError


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert RunConfig.load(tmp_path / "c.json") == cfg


def test_partial_config_merges_with_defaults():
    cfg = RunConfig.from_dict({"stage2": {"epochs": 3}, "synth": {"frequency_range": [0.1, 0.3]}})
    assert cfg.stage2.epochs == 3 and cfg.stage2.learning_rate == 0.01
    assert cfg.synth.frequency_range == (0.1, 0.3)


@pytest.mark.parametrize("raw", [
    {"stage3": {}},
    {"stage2": {"epochz": 3}},
    {"synth": {"height": 30}},
    {"stage1": {"stage": 2}},
    {"protocol": {"test_fraction": 1.5}},
    {"stage2": "fast"},
    [],
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(raw)


def test_overrides():
    cfg = RunConfig().override(["stage2.pool=max", "protocol.seed=9", "stage1.learning_rate=0.25"])
    assert cfg.stage2.pool == "max" and cfg.protocol.seed == 9 and cfg.stage1.learning_rate == 0.25
    with pytest.raises(ConfigurationError):
        RunConfig().override(["epochs=3"])
    with pytest.raises(ConfigurationError):
        RunConfig().override(["nowhere.epochs=3"])


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigurationError):
        RunConfig.load(tmp_path / "c.json")


def test_experiment_view():
    exp = RunConfig.from_dict({"protocol": {"ablation": True, "test_fraction": 0.25}}).experiment()
    assert exp.ablation and exp.test_fraction == 0.25
    assert json.loads(RunConfig().to_json())["stage1"]["stage"] == 1
