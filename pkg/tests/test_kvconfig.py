"""key=value config file parsing and dataclass coercion."""

import pytest

from partcat.kvconfig import (ConfigError, coerce_dataclass_kv,
                              dataclass_to_kv, read_kv, write_kv)
from partcat.model import ModelConfig, load_model_config, save_model_config


def test_read_write_round_trip(tmp_path):
    items = {"a": "1", "b": "hello world", "c": "0.5"}
    path = tmp_path / "x.cfg"
    write_kv(path, items)
    assert read_kv(path) == items


def test_read_skips_comments_and_blanks(tmp_path):
    path = tmp_path / "x.cfg"
    path.write_text("# comment\n\nkey = value \n")
    assert read_kv(path) == {"key": "value"}


def test_read_rejects_malformed(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("just a line\n")
    with pytest.raises(ConfigError, match="key=value"):
        read_kv(path)


def test_model_config_round_trip(tmp_path):
    cfg = ModelConfig(c=24, d=8, heads=4, guidance_levels=("part",),
                      positional_bias=False, dtype="float64")
    path = tmp_path / "m.cfg"
    save_model_config(cfg, path)
    assert load_model_config(path) == cfg


def test_coerce_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown"):
        coerce_dataclass_kv(ModelConfig, {"bogus": "1"})


def test_coerce_bool_and_tuple():
    cfg = coerce_dataclass_kv(ModelConfig, {"single_volume": "true",
                                            "guidance_levels": "obj,part"})
    assert cfg.single_volume is True
    assert cfg.guidance_levels == ("obj", "part")
    empty = coerce_dataclass_kv(ModelConfig, {"guidance_levels": ""})
    assert empty.guidance_levels == ()


def test_dataclass_to_kv_strings():
    kv = dataclass_to_kv(ModelConfig())
    assert kv["c"] == "8"
    assert kv["guidance_levels"] == "obj,part"
