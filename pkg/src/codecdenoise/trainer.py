"""Training loop, checkpoint (de)serialisation of a full run, and inference.

Forward pass per batch::

    noisy -> codec.encode -> normalize -> U-Net -> denormalize -> codec.decode -> loss vs clean

Codec parameters are never handed to the optimizer; gradients flow
through the decoder only to reach the U-Net.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio_io import Waveform, read_wav, write_wav
from .checkpoint import Checkpoint, CheckpointFormatError, load_checkpoint, save_checkpoint
from .codec import CodecSpec, LatentStats, RvqSpec, build_codec, fit_latent_stats, normalize, denormalize
from .degrade import ManifestEntry, read_manifest, split_files  # noqa: F401  (split_files re-exported)
from .denoiser import UNetConfig, build_unet, unet_forward
from .metrics import denoise_wave
from .losses import CurriculumSchedule, LossWeights, combined_loss
from .optim import OptimState, SchedulerState, adamw_step, plateau_step
from .spectral import MelConfig, StftConfig

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["epoch", "lr", "train_total", "val_total", "l1", "mel", "sisdr_db"]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    mel_n_fft: int = 1024
    mel_hop: int = 256
    n_mels: int = 80
    mel_log: bool = False
    mel_norm: str = "l1"
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6

    def mel_config(self, sample_rate: int) -> MelConfig:
        return MelConfig(StftConfig(self.mel_n_fft, self.mel_hop), self.n_mels, 0.0, None, sample_rate, self.mel_log)

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["schedule"] = CurriculumSchedule(**d.get("schedule", {}))
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        return cls(**d)


# ------------------------------------------------------------------ data


@dataclass
class PairSet:
    ids: list
    noisy: np.ndarray  # (N, T) float32
    clean: np.ndarray

    def __len__(self):
        return len(self.ids)


def load_pairs(entries: list[ManifestEntry], root) -> PairSet:
    root = Path(root)
    entries = sorted(entries, key=lambda e: e.id)
    if not entries:
        return PairSet([], np.zeros((0, 0), np.float32), np.zeros((0, 0), np.float32))
    n = len(entries)
    t = entries[0].chunk_len
    noisy = np.empty((n, t), np.float32)
    clean = np.empty((n, t), np.float32)
    for i, e in enumerate(entries):
        noisy[i] = read_wav(root / e.noisy).samples
        clean[i] = read_wav(root / e.clean).samples
    return PairSet([e.id for e in entries], noisy, clean)


# ----------------------------------------------------------------- model


@dataclass
class DenoiserModel:
    """Everything needed to run inference: codec, U-Net weights, latent stats."""

    codec: object
    unet_config: UNetConfig
    params: dict
    stats: LatentStats
    chunk_len: int

    def forward(self, noisy: np.ndarray) -> ad.Tensor:
        """(B, T) noisy float32 -> (B, T) denoised Tensor (graph kept when grads are on)."""
        z = normalize(self.codec.encode_array(noisy), self.stats)
        pred = unet_forward(ad.Tensor(z), self.params, self.unet_config)
        return self.codec.decode_tensor(denormalize(pred, self.stats), noisy.shape[-1])

    def denoise(self, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Chunk, denoise and concatenate (no overlap); output has the input length."""
        x = np.asarray(x, dtype=np.float32)
        n = len(x)
        c = self.chunk_len
        count = max(1, -(-n // c))
        padded = np.zeros(count * c, np.float32)
        padded[:n] = x
        blocks = padded.reshape(count, c)
        out = []
        with ad.no_grad():
            for i in range(0, count, batch_size):
                out.append(self.forward(blocks[i : i + batch_size]).data)
        return np.concatenate(out, axis=0).reshape(-1)[:n]


def _tensor_map(params: dict, prefix: str) -> dict:
    return {f"{prefix}/{k}": v.data for k, v in params.items()}


def model_to_checkpoint(model: DenoiserModel, extra_config: dict | None = None) -> Checkpoint:
    tensors = _tensor_map(model.params, "unet")
    tensors.update(_tensor_map(model.codec.params, "codec"))
    tensors["stats/mean"] = model.stats.mean
    tensors["stats/std"] = model.stats.std
    spec = model.codec.spec
    config = {
        "codec": {"kind": spec.kind, "hop": spec.hop, "c_lat": spec.c_lat, "sample_rate": spec.sample_rate,
                  "rvq": asdict(spec.rvq) if spec.rvq else None},
        "unet": model.unet_config.to_json(),
        "chunk_len": model.chunk_len,
    }
    config.update(extra_config or {})
    return Checkpoint(config=config, tensors=tensors, state={})


def model_from_checkpoint(ckpt: Checkpoint) -> DenoiserModel:
    try:
        cc = dict(ckpt.config["codec"])
        rvq = cc.pop("rvq", None)
        spec = CodecSpec(**cc, rvq=RvqSpec(**rvq) if rvq else None)
        unet_cfg = UNetConfig(**ckpt.config["unet"])
        chunk_len = int(ckpt.config["chunk_len"])
        mean, std = ckpt.tensors["stats/mean"], ckpt.tensors["stats/std"]
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"checkpoint is missing model fields: {exc}") from None
    codec_params = {k[len("codec/"):]: v for k, v in ckpt.tensors.items() if k.startswith("codec/")}
    codec = build_codec(spec, codec_params or None)
    params = {k[len("unet/"):]: ad.Tensor(v.copy(), requires_grad=True) for k, v in ckpt.tensors.items() if k.startswith("unet/")}
    return DenoiserModel(codec, unet_cfg, params, LatentStats(mean, std), chunk_len)


def denoise_file(checkpoint, wav_in, wav_out) -> Waveform:
    """Denoise one WAV file with a saved model; the output has the input's length and rate."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    model = model_from_checkpoint(ckpt)
    y = denoise_wave(model, read_wav(wav_in))
    write_wav(wav_out, y)
    return y


# -------------------------------------------------------------- training


@dataclass
class TrainResult:
    history: list
    last_checkpoint: Path
    best_checkpoint: Path
    model: DenoiserModel


def _batch_stats(model: DenoiserModel, pairs: PairSet, idx, cfg: TrainConfig, epoch: int, mel_cfg, train: bool):
    noisy = pairs.noisy[idx]
    clean = pairs.clean[idx]
    y_hat = model.forward(noisy)
    return combined_loss(y_hat, ad.Tensor(clean), cfg.weights, epoch, cfg.schedule, mel_cfg, cfg.mel_norm)


def evaluate_loss(model: DenoiserModel, pairs: PairSet, cfg: TrainConfig, mel_cfg) -> dict:
    """Mean full-weighting loss breakdown over ``pairs`` (curriculum fully on)."""
    full = max(cfg.schedule.sisdr_start_epoch, 0)
    sums: dict[str, float] = {}
    with ad.no_grad():
        for i in range(0, len(pairs), cfg.batch_size):
            idx = np.arange(i, min(i + cfg.batch_size, len(pairs)))
            _, br = _batch_stats(model, pairs, idx, cfg, full, mel_cfg, False)
            for k, v in br.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
    return {k: v / len(pairs) for k, v in sums.items()}


def _run_config(model: DenoiserModel, cfg: TrainConfig, extra: dict | None) -> dict:
    out = {"train": cfg.to_json()}
    out.update(extra or {})
    return out


def _save_state(path, model, cfg, optim: OptimState, sched: SchedulerState, epoch, history, best_val, extra):
    ckpt = model_to_checkpoint(model, _run_config(model, cfg, extra))
    for k, m in optim.m.items():
        ckpt.tensors[f"optim.m/{k}"] = m
        ckpt.tensors[f"optim.v/{k}"] = optim.v[k]
    ckpt.state = {
        "epoch": epoch,
        "optim": {"lr": optim.lr, "betas": list(optim.betas), "eps": optim.eps, "weight_decay": optim.weight_decay, "t": optim.t},
        "scheduler": {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in asdict(sched).items()},
        "history": history,
        "best_val": best_val,
        "codec_checksum": model.codec.checksum(),
    }
    save_checkpoint(path, ckpt)


def train(
    train_pairs: PairSet,
    val_pairs: PairSet,
    codec,
    unet_config: UNetConfig,
    cfg: TrainConfig = TrainConfig(),
    out_dir=None,
    resume=None,
    extra_config: dict | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Train the latent U-Net for ``cfg.epochs`` epochs.

    Writes ``last.adnc`` every epoch, ``best.adnc`` when validation loss
    improves, ``curves.csv`` and ``train_log.jsonl`` into ``out_dir``.
    ``resume`` is a checkpoint path written by a previous call; training
    continues from the epoch after it.  ``stop_after_epoch`` ends the run
    early (used to test resume equivalence).
    """
    if len(train_pairs) == 0:
        raise ValueError("empty training set")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rate = codec.sample_rate
    mel_cfg = cfg.mel_config(rate)
    chunk_len = train_pairs.noisy.shape[1]
    codec_sum = codec.checksum()

    if resume is not None:
        ck = load_checkpoint(resume)
        model = model_from_checkpoint(ck)
        model.codec = codec
        if ck.state.get("codec_checksum") != codec_sum:
            raise ValueError("resume checkpoint was trained with different codec parameters")
        st = ck.state
        o = st["optim"]
        optim = OptimState(o["lr"], tuple(o["betas"]), o["eps"], o["weight_decay"], o["t"])
        for k in model.params:
            if f"optim.m/{k}" in ck.tensors:
                optim.m[k] = ck.tensors[f"optim.m/{k}"].copy()
                optim.v[k] = ck.tensors[f"optim.v/{k}"].copy()
        s = dict(st["scheduler"])
        s["best"] = math.inf if s["best"] is None else s["best"]
        sched = SchedulerState(**s)
        start = st["epoch"] + 1
        history = list(st["history"])
        best_val = st["best_val"] if st["best_val"] is not None else math.inf
    else:
        latents = [codec.encode_array(train_pairs.noisy[i : i + 64]) for i in range(0, len(train_pairs), 64)]
        stats = fit_latent_stats(latents)
        stats = LatentStats(stats.mean.astype(np.float32), stats.std.astype(np.float32))
        model = DenoiserModel(codec, unet_config, build_unet(unet_config, cfg.seed), stats, chunk_len)
        optim = OptimState(cfg.lr, tuple(cfg.betas), cfg.eps, cfg.weight_decay)
        sched = SchedulerState(cfg.lr, "min", cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold, cfg.min_lr)
        start = 0
        history = []
        best_val = math.inf

    last_path = out / "last.adnc" if out else None
    best_path = out / "best.adnc" if out else None
    if out is not None and start == 0:
        with open(out / "curves.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(CURVE_COLUMNS)
        (out / "train_log.jsonl").write_text("")

    n = len(train_pairs)
    for epoch in range(start, cfg.epochs):
        t0 = time.time()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        lr_used = optim.lr
        sums: dict[str, float] = {}
        for i in range(0, n, cfg.batch_size):
            idx = np.sort(order[i : i + cfg.batch_size])
            for p in model.params.values():
                p.grad = None
            try:
                loss, br = _batch_stats(model, train_pairs, idx, cfg, epoch, mel_cfg, True)
                if not math.isfinite(br["total"]):
                    raise FloatingPointError("loss is not finite")
            except FloatingPointError as exc:
                if out is not None:
                    _save_state(out / "diverged.adnc", model, cfg, optim, sched, epoch, history, best_val, extra_config)
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, batch {i // cfg.batch_size}: {exc}"
                ) from None
            ad.backward(loss)
            adamw_step(model.params, {k: p.grad for k, p in model.params.items()}, optim)
            for k, v in br.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        train_br = {k: v / n for k, v in sums.items()}
        val_br = evaluate_loss(model, val_pairs, cfg, mel_cfg) if len(val_pairs) else train_br
        optim.lr = plateau_step(sched, val_br["total"])
        row = {
            "epoch": epoch,
            "lr": lr_used,
            "train_total": train_br["total"],
            "val_total": val_br["total"],
            "l1": train_br["l1"],
            "mel": train_br["mel"],
            "sisdr_db": train_br["sisdr_db"],
            "w_sisdr": train_br["w_sisdr"],
            "val_sisdr_db": val_br["sisdr_db"],
        }
        history.append(row)
        log.info(
            "epoch %d lr %.2e train %.5f val %.5f l1 %.5f mel %.5f sisdr %.2f dB w_sisdr %g",
            epoch, lr_used, row["train_total"], row["val_total"], row["l1"], row["mel"], row["sisdr_db"], row["w_sisdr"],
        )
        if codec.checksum() != codec_sum:
            raise RuntimeError("frozen codec parameters changed during training")
        improved = val_br["total"] < best_val
        if improved:
            best_val = val_br["total"]
        if out is not None:
            with open(out / "curves.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([row[c] for c in CURVE_COLUMNS])
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps({**row, "seconds": round(time.time() - t0, 2)}) + "\n")
            _save_state(last_path, model, cfg, optim, sched, epoch, history, best_val, extra_config)
            if improved:
                _save_state(best_path, model, cfg, optim, sched, epoch, history, best_val, extra_config)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    return TrainResult(history, last_path, best_path, model)
