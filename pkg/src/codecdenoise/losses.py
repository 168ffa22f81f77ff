"""Waveform L1, mel-spectrogram L1 and negative SI-SDR, plus their weighted sum.

All losses take (T,) or (B, T) inputs.  Tensors give differentiable
results; numpy arrays are accepted and wrapped.  Batched inputs are
averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .spectral import MelConfig, mel_spectrogram

SISDR_CLAMP_DB = 60.0


class DegenerateReferenceError(ValueError):
    """The reference signal has zero energy."""


@dataclass(frozen=True)
class LossWeights:
    w_l1: float = 1.0
    w_mel: float = 1.0
    w_sisdr: float = 0.01

    def __post_init__(self):
        ws = (self.w_l1, self.w_mel, self.w_sisdr)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError(f"loss weights must be >= 0 with at least one > 0, got {ws}")


@dataclass(frozen=True)
class CurriculumSchedule:
    sisdr_start_epoch: int = 5

    def __post_init__(self):
        if self.sisdr_start_epoch < 0:
            raise ValueError("sisdr_start_epoch must be >= 0")

    def sisdr_active(self, epoch: int) -> bool:
        return epoch >= self.sisdr_start_epoch


def _pair(y_hat, y) -> tuple[ad.Tensor, ad.Tensor]:
    y_hat, y = ad._as_tensor(y_hat), ad._as_tensor(y)
    if y_hat.shape != y.shape:
        raise ad.ShapeError(f"length mismatch: {y_hat.shape} vs {y.shape}")
    return y_hat, y


def l1_waveform(y_hat, y) -> ad.Tensor:
    """Mean absolute sample error."""
    y_hat, y = _pair(y_hat, y)
    return ad.mean_abs(y_hat - y)


def mel_loss(y_hat, y, mel_cfg: MelConfig = MelConfig(), norm: str = "l1") -> ad.Tensor:
    """Mean entrywise distance between mel spectrograms (``norm`` is l1 or l2)."""
    y_hat, y = _pair(y_hat, y)
    diff = mel_spectrogram(y_hat, mel_cfg) - mel_spectrogram(y, mel_cfg)
    if norm == "l1":
        return ad.mean_abs(diff)
    if norm == "l2":
        return ad.mul_scalar(ad.sum_sq(diff), 1.0 / diff.data.size)
    raise ValueError(f"norm must be 'l1' or 'l2', got {norm!r}")


def si_sdr_db(y_hat, y, eps: float = 1e-8) -> ad.Tensor:
    """Scale-invariant SDR in dB, per batch row, clamped to +-60 dB.

    The target is y scaled by <y_hat, y> / (||y||^2 + eps); everything else
    in y_hat counts as error.
    """
    y_hat, y = _pair(y_hat, y)
    energy = np.sum(np.asarray(y.data, dtype=np.float64) ** 2, axis=-1)
    if np.any(energy == 0):
        raise DegenerateReferenceError("SI-SDR reference has zero energy")
    alpha = ad.dot(y_hat, y) / ad.add_scalar(ad.sum_sq(y, axis=-1), eps)
    if y.ndim > 1:
        alpha = ad.reshape(alpha, alpha.shape + (1,))
    target = alpha * y
    noise = y_hat - target
    ratio = ad.add_scalar(ad.sum_sq(target, axis=-1), eps) / ad.add_scalar(ad.sum_sq(noise, axis=-1), eps)
    return ad.clamp(ad.mul_scalar(ad.log10(ratio), 10.0), -SISDR_CLAMP_DB, SISDR_CLAMP_DB)


def si_sdr_loss(y_hat, y, eps: float = 1e-8) -> ad.Tensor:
    """Negative SI-SDR, averaged over the batch."""
    return ad.neg(ad.mean(si_sdr_db(y_hat, y, eps)))


def combined_loss(
    y_hat,
    y,
    weights: LossWeights = LossWeights(),
    epoch: int = 0,
    schedule: CurriculumSchedule = CurriculumSchedule(),
    mel_cfg: MelConfig = MelConfig(),
    mel_norm: str = "l1",
) -> tuple[ad.Tensor, dict]:
    """Weighted loss with the SI-SDR term switched on by the curriculum.

    The breakdown holds the unweighted terms as floats plus the effective
    SI-SDR weight.  Before the curriculum switch the SI-SDR value is still
    reported but computed outside the graph.
    """
    y_hat, y = _pair(y_hat, y)
    l1 = l1_waveform(y_hat, y)
    mel = mel_loss(y_hat, y, mel_cfg, mel_norm)
    active = schedule.sisdr_active(epoch) and weights.w_sisdr > 0
    if active:
        neg_sisdr = si_sdr_loss(y_hat, y)
    else:
        with ad.no_grad():
            neg_sisdr = si_sdr_loss(y_hat.detach(), y.detach())

    total = ad.mul_scalar(l1, weights.w_l1) + ad.mul_scalar(mel, weights.w_mel)
    w_sisdr = weights.w_sisdr if active else 0.0
    if active:
        total = total + ad.mul_scalar(neg_sisdr, w_sisdr)
    breakdown = {
        "l1": float(l1.data),
        "mel": float(mel.data),
        "sisdr_db": -float(neg_sisdr.data),
        "w_sisdr": w_sisdr,
        "total": float(total.data),
    }
    return total, breakdown
