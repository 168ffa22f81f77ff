import json

import pytest

from codecdenoise.config import (
    DEFAULTS,
    codec_spec,
    codec_train_config,
    dataset_config,
    load_config,
    train_config,
    unet_config,
)
from codecdenoise.errors import ConfigError


def test_defaults_build_every_section():
    cfg = load_config()
    assert cfg == DEFAULTS and cfg is not DEFAULTS
    spec = codec_spec(cfg)
    assert spec.kind == "IdentityFrame" and spec.c_lat == 256
    assert unet_config(cfg, spec.c_lat).channels() == [64, 128, 256, 512, 512]
    t = train_config(cfg)
    assert (t.epochs, t.batch_size, t.lr) == (30, 16, 1e-4)
    assert t.schedule.sisdr_start_epoch == 5
    assert dataset_config(cfg).splits == (0.8, 0.1, 0.1)
    assert codec_train_config(cfg).steps == 1000


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"trainer": {"epochs": 7, "lr": 0.5}, "unet": {"levels": 3}}))
    cfg = load_config(p, {"trainer.epochs": 9, "trainer.seed": None})
    assert cfg["trainer"]["epochs"] == 9
    assert cfg["trainer"]["lr"] == 0.5
    assert cfg["trainer"]["seed"] == 0
    assert cfg["unet"]["levels"] == 3
    assert DEFAULTS["trainer"]["epochs"] == 30


@pytest.mark.parametrize(
    "content, match",
    [
        ({"trainer": {"epoch": 3}}, "trainer.epoch"),
        ({"optimizer": {}}, "optimizer"),
        ({"trainer": 3}, "must be an object"),
        ([1, 2], "JSON object"),
    ],
)
def test_bad_files(tmp_path, content, match):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(content))
    with pytest.raises(ConfigError, match=match):
        load_config(p)


def test_missing_and_malformed(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="valid JSON"):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        load_config(None, {"trainer.nonsense": 1})


def test_invalid_values_become_config_errors():
    cfg = load_config(None, {"loss.w_l1": 0.0, "loss.w_mel": 0.0, "loss.w_sisdr": 0.0})
    with pytest.raises(ConfigError):
        train_config(cfg)
    cfg = load_config(None, {"unet.norm_groups": 7})
    with pytest.raises(ConfigError):
        unet_config(cfg, 64)
    with pytest.raises(ConfigError):
        codec_spec(load_config(None, {"codec.kind": "DAC"}))
