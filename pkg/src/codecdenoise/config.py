"""Run configuration: a JSON file of sections, merged over defaults.

Sections: dataset, codec, unet, loss, trainer, eval.  Unknown sections or
keys are rejected.  Command-line flags are applied on top as dotted
overrides (``{"trainer.epochs": 3}``).
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .codec import CodecSpec, RvqSpec, ToyCodecTrainConfig
from .degrade import DatasetConfig, DegradationKind
from .denoiser import UNetConfig
from .errors import ConfigError
from .losses import CurriculumSchedule, LossWeights
from .trainer import TrainConfig

DEFAULTS: dict = {
    "dataset": {
        "clean_dirs": [],
        "noise_dirs": [],
        "rir_dirs": [],
        "variants_per_chunk": 3,
        "snr_range_db": [0.0, 15.0],
        "global_seed": 0,
        "splits": [0.8, 0.1, 0.1],
        "sample_rate": 44100,
        "chunk_len": 88200,
        "kinds": [k.value for k in DegradationKind],
        "rt60_range_s": [0.2, 1.2],
        "drr_range_db": [0.0, 10.0],
    },
    "codec": {
        "kind": "IdentityFrame",
        "hop": 256,
        "c_lat": None,
        "rvq_stages": 0,
        "rvq_codebook_size": 256,
        "pretrain_steps": 1000,
        "pretrain_batch": 8,
        "pretrain_crop_len": 8192,
        "pretrain_lr": 2e-3,
        "pretrain_seed": 0,
    },
    "unet": {
        "base_channels": 64,
        "levels": 5,
        "max_channels": 512,
        "res_blocks_per_level": 2,
        "norm_groups": 8,
    },
    "loss": {
        "w_l1": 1.0,
        "w_mel": 1.0,
        "w_sisdr": 0.01,
        "sisdr_start_epoch": 5,
        "mel_n_fft": 1024,
        "mel_hop": 256,
        "n_mels": 80,
        "mel_log": False,
        "mel_norm": "l1",
    },
    "trainer": {
        "epochs": 30,
        "batch_size": 16,
        "lr": 1e-4,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "weight_decay": 0.01,
        "seed": 0,
        "plateau_factor": 0.5,
        "plateau_patience": 3,
        "plateau_threshold": 1e-4,
        "min_lr": 1e-6,
    },
    "eval": {"n": 1000, "seed": 0},
}


def _merge(base: dict, update: dict, where: str) -> None:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{where}{key}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}{key}' must be an object")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then dotted ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, data, "")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        _merge(cfg, {section: {key: value}}, "")
    return cfg


def dataset_config(cfg: dict) -> DatasetConfig:
    d = dict(cfg["dataset"])
    for k in ("snr_range_db", "splits", "rt60_range_s", "drr_range_db", "kinds"):
        d[k] = tuple(d[k])
    try:
        return DatasetConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dataset: {exc}") from None


def codec_spec(cfg: dict) -> CodecSpec:
    c = cfg["codec"]
    rvq = RvqSpec(c["rvq_stages"], c["rvq_codebook_size"]) if c["rvq_stages"] else None
    return CodecSpec(c["kind"], c["hop"], c["c_lat"], cfg["dataset"]["sample_rate"], rvq)


def codec_train_config(cfg: dict) -> ToyCodecTrainConfig:
    c = cfg["codec"]
    return ToyCodecTrainConfig(
        steps=c["pretrain_steps"], batch=c["pretrain_batch"], crop_len=c["pretrain_crop_len"],
        lr=c["pretrain_lr"], seed=c["pretrain_seed"],
    )


def unet_config(cfg: dict, c_lat: int) -> UNetConfig:
    return UNetConfig(in_channels=c_lat, **cfg["unet"])


def train_config(cfg: dict) -> TrainConfig:
    t, lo = cfg["trainer"], cfg["loss"]
    try:
        return TrainConfig(
            **{k: v for k, v in t.items() if k != "betas"},
            betas=tuple(t["betas"]),
            weights=LossWeights(lo["w_l1"], lo["w_mel"], lo["w_sisdr"]),
            schedule=CurriculumSchedule(lo["sisdr_start_epoch"]),
            mel_n_fft=lo["mel_n_fft"], mel_hop=lo["mel_hop"], n_mels=lo["n_mels"],
            mel_log=lo["mel_log"], mel_norm=lo["mel_norm"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"trainer/loss: {exc}") from None
