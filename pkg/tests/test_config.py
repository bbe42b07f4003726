import pytest
import yaml

from neckwave.config import ConfigError, default_config, from_dict, load_config


def _raw():
    return default_config().to_dict()


def test_default_config_validates():
    cfg = default_config()
    assert cfg.seed == 0
    assert cfg.grid.cells_per_h >= 10
    assert list(cfg.wave.h_list) == [0.05, 0.02, 0.01]


def test_round_trip_and_digest(tmp_path):
    raw = _raw()
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(raw))
    again = load_config(path)
    assert again.to_dict() == raw
    assert again.digest() == default_config().digest()
    raw["seed"] = 1
    assert from_dict(raw).digest() != again.digest()


def test_seed_is_mandatory():
    raw = _raw()
    del raw["seed"]
    with pytest.raises(ConfigError, match="seed"):
        from_dict(raw)


@pytest.mark.parametrize("section,key,value,match", [
    ("grid", "cells_per_h", 4, "resolution rule"),
    ("wave", "h_list", [0.01, 0.02], "decreasing"),
    ("wave", "h_list", [], "empty"),
    ("wave", "end", "left", "end"),
    ("propagation", "gamma_uns", 0.5, "gamma_uns"),
    ("propagation", "N", 100, "N"),
    ("grid", "bounds", [0.9, -0.9, -0.7, 0.7], "increasing"),
])
def test_invalid_values(section, key, value, match):
    raw = _raw()
    raw[section][key] = value
    with pytest.raises(ConfigError, match=match):
        from_dict(raw)


def test_unknown_keys_rejected():
    raw = _raw()
    raw["grid"]["cell_size"] = 1
    with pytest.raises(ConfigError, match="unknown keys"):
        from_dict(raw)
    raw = _raw()
    raw["extra"] = 1
    with pytest.raises(ConfigError, match="top-level"):
        from_dict(raw)
    raw = _raw()
    raw["verify"]["enabled"] = ["residual", "bogus"]
    with pytest.raises(ConfigError, match="unknown checks"):
        from_dict(raw)
