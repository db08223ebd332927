import json

import pytest
from hypothesis import given, strategies as st

from cptlab.harness.config import (ConfigError, TrainConfig, apply_overrides, config_from_dict, config_hash,
                                   config_to_dict, load_config, precision_preset, save_config)


def test_defaults_validate():
    cfg = TrainConfig().validate()
    assert cfg.fw_bits(0) == 8 and cfg.bw_bits(0) == 8 and cfg.lr_at(0) == 0.05


def test_yaml_and_json_load(tmp_path):
    (tmp_path / "a.yaml").write_text("epochs: 8\nprecision:\n  pattern: cosine\n  b_min: 4\n  num_cycles: 2\n")
    cfg = load_config(tmp_path / "a.yaml").validate()
    assert cfg.epochs == 8 and cfg.precision.b_min == 4 and cfg.precision.b_max == 8
    save_config(cfg, tmp_path / "b.json")
    assert load_config(tmp_path / "b.json") == cfg


@pytest.mark.parametrize("text,match", [
    ("epochs: 8\nbogus: 1\n", "bogus"),
    ("precision:\n  b_mn: 3\n", "precision.b_mn"),
    ("precision: 3\n", "mapping"),
    ("epochs: [\n", "parse"),
])
def test_bad_files(tmp_path, text, match):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(tmp_path / "c.yaml")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_overrides():
    cfg = apply_overrides(TrainConfig(), ["precision.b_min=3", "lr.lrs=[0.1, 0.01, 0.001]", "name=x",
                                          "precision.eval_bits=null"])
    assert cfg.precision.b_min == 3 and cfg.lr.lrs == [0.1, 0.01, 0.001] and cfg.name == "x"
    for bad in (["precision.nope=1"], ["nope.b=1"], ["epochs"], ["epochs.x=1"]):
        with pytest.raises(ConfigError):
            apply_overrides(TrainConfig(), bad)


@pytest.mark.parametrize("d", [
    {"epochs": 0},
    {"model": "resnet"},
    {"dtype": "float16"},
    {"precision": {"cpt_start_epoch": 40}},
    {"precision": {"fw_bits_by_epoch": [8]}},
    {"precision": {"pattern": "cosine", "b_min": 3, "num_cycles": 64}},
    {"precision": {"pattern": "cosine", "b_min": 1, "num_cycles": 4}},
    {"precision": {"bw_bits": 33}},
    {"lr": {"kind": "exp"}},
    {"lr": {"lrs": [0.1]}},
])
def test_invalid_configs(d):
    with pytest.raises(ConfigError):
        config_from_dict(d).validate()


def test_hash_stable_and_sensitive():
    a = TrainConfig()
    assert config_hash(a) == config_hash(config_from_dict(json.loads(json.dumps(config_to_dict(a)))))
    assert config_hash(a) != config_hash(apply_overrides(a, ["seed=1"]))


def test_precision_presets():
    p = precision_preset("fw3-8_bw8", 160, 32)
    assert (p.pattern, p.b_min, p.b_max, p.bw_bits, p.num_cycles) == ("cosine", 3, 8, 8, 32)
    s = precision_preset("FW6_BW6", 160)
    assert (s.pattern, s.b_min, s.b_max, s.bw_bits) == ("static", 6, 6, 6)
    for bad in ("fw8", "x3-8_bw8", "fw3-x_bw8"):
        with pytest.raises(ConfigError):
            precision_preset(bad, 10)


def test_default_lr_boundaries_short_runs():
    assert TrainConfig(epochs=40).lr_boundaries() == [20, 30, 40]
    assert TrainConfig(epochs=2).lr_boundaries() == [1, 2]
    assert [TrainConfig(epochs=2).lr_at(t) for t in range(2)] == [0.05, 0.005]


@given(st.integers(1, 200), st.integers(2, 8), st.integers(0, 6))
def test_fw_bits_within_bounds(epochs, lo, extra):
    hi = min(32, lo + extra)
    cycles = max(1, epochs // 4)
    cfg = config_from_dict({"epochs": epochs, "precision": {"pattern": "cosine", "b_min": lo, "b_max": hi,
                                                            "num_cycles": cycles}})
    cfg.validate()
    assert all(lo <= cfg.fw_bits(t) <= hi for t in range(epochs))
