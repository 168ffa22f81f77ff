"""STFT, mel filterbanks and one-third-octave band energies.

``mel_spectrogram`` accepts either a numpy array or an autodiff
:class:`~codecdenoise.autodiff.Tensor`; the tensor path is differentiable
with respect to the waveform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 1024
    hop: int = 256
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if self.n_fft < 1 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must be in (0, n_fft], got {self.hop}")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")


@dataclass(frozen=True)
class MelConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None  # None -> sample_rate / 2
    sample_rate: int = 44_100
    log: bool = False
    log_eps: float = 1e-5

    def __post_init__(self):
        top = self.sample_rate / 2 if self.f_max is None else self.f_max
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 <= self.f_min < top <= self.sample_rate / 2:
            raise ValueError(f"need 0 <= f_min < f_max <= sr/2, got {self.f_min}, {top}")

    @property
    def top(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else self.f_max


def hann(n: int) -> np.ndarray:
    """Symmetric Hann window 0.5 * (1 - cos(2 pi k / (N - 1)))."""
    if n == 1:
        return np.ones(1)
    return 0.5 * (1 - np.cos(2 * np.pi * np.arange(n) / (n - 1)))


def n_frames(length: int, cfg: StftConfig) -> int:
    padded = length + (cfg.n_fft // 2) * 2 if cfg.center else length
    if padded < cfg.n_fft:
        return 0
    return 1 + (padded - cfg.n_fft) // cfg.hop


@lru_cache(maxsize=64)
def _frame_index(length: int, cfg: StftConfig) -> np.ndarray:
    """(frames, n_fft) indices into the unpadded signal, reflect padding folded in."""
    pad = cfg.n_fft // 2 if cfg.center else 0
    src = np.arange(length)
    if pad:
        src = np.pad(src, pad, mode="reflect") if length > 1 else np.zeros(length + 2 * pad, dtype=int)
    f = n_frames(length, cfg)
    idx = np.arange(f)[:, None] * cfg.hop + np.arange(cfg.n_fft)[None, :]
    out = src[idx]
    out.setflags(write=False)
    return out


def stft(wave, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex STFT of shape (n_fft // 2 + 1, frames)."""
    x = np.asarray(wave)
    if x.ndim != 1 or len(x) < 1:
        raise ValueError("stft expects a non-empty 1-D signal")
    idx = _frame_index(len(x), cfg)
    frames = x[idx] * hann(cfg.n_fft).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    return np.fft.rfft(frames, axis=-1).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(cfg: MelConfig) -> np.ndarray:
    """Center frequencies (Hz) of the ``n_mels`` triangles."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.top), cfg.n_mels + 2))
    return pts[1:-1]


@lru_cache(maxsize=16)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-mel filterbank of shape (n_mels, n_fft // 2 + 1)."""
    n_fft = cfg.stft.n_fft
    freqs = np.arange(n_fft // 2 + 1) * cfg.sample_rate / n_fft
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.top), cfg.n_mels + 2))
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rise = (freqs[None, :] - lo) / (mid - lo)
    fall = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rise, fall))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if len(empty):
        raise ValueError(
            f"{len(empty)} of {cfg.n_mels} mel filters contain no FFT bin "
            f"(n_fft={n_fft}); lower n_mels or raise n_fft"
        )
    fb.setflags(write=False)
    return fb


def mel_spectrogram(wave, cfg: MelConfig = MelConfig()):
    """Mel filterbank applied to the linear STFT magnitude.

    numpy input of shape (T,) gives (n_mels, frames).  A Tensor of shape
    (T,) or (B, T) gives a differentiable Tensor of shape (..., n_mels, frames).
    With ``cfg.log`` the result is log10(mel + log_eps).
    """
    fb = mel_filterbank(cfg)
    if isinstance(wave, ad.Tensor):
        idx = _frame_index(wave.shape[-1], cfg.stft)
        frames = ad.gather_frames(wave, idx) * hann(cfg.stft.n_fft).astype(wave.dtype)
        mag = ad.rfft_magnitude(frames)  # (..., frames, bins)
        axes = tuple(range(mag.ndim - 2)) + (mag.ndim - 1, mag.ndim - 2)
        mel = ad.project(ad.transpose(mag, axes), fb)
        return ad.log10(ad.add_scalar(mel, cfg.log_eps)) if cfg.log else mel
    x = np.asarray(wave)
    mel = fb.astype(x.dtype if x.dtype == np.float32 else np.float64) @ np.abs(stft(x, cfg.stft))
    return np.log10(mel + cfg.log_eps) if cfg.log else mel


# ------------------------------------------------------------ STOI front end


@dataclass(frozen=True)
class ThirdOctaveConfig:
    sample_rate: int = 10_000
    frame_len: int = 256
    hop: int = 128
    n_fft: int = 512
    n_bands: int = 15
    min_center: float = 150.0


def third_octave_bands(cfg: ThirdOctaveConfig = ThirdOctaveConfig()):
    """Band matrix (n_bands, n_fft // 2 + 1) plus center, lower and upper edges in Hz.

    Edges are snapped to the nearest FFT bin, the same way the reference
    STOI implementation builds its one-third-octave matrix.
    """
    freqs = np.linspace(0, cfg.sample_rate, cfg.n_fft + 1)[: cfg.n_fft // 2 + 1]
    k = np.arange(cfg.n_bands)
    centers = cfg.min_center * 2.0 ** (k / 3.0)
    lower = centers * 2.0 ** (-1 / 6)
    upper = centers * 2.0 ** (1 / 6)
    obm = np.zeros((cfg.n_bands, len(freqs)))
    for i in range(cfg.n_bands):
        lo = int(np.argmin((freqs - lower[i]) ** 2))
        hi = int(np.argmin((freqs - upper[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm, centers, lower, upper


def _stoi_frames(x: np.ndarray, cfg: ThirdOctaveConfig) -> np.ndarray:
    """Hann-windowed analysis frames, shape (frames, frame_len)."""
    win = np.hanning(cfg.frame_len + 2)[1:-1]
    count = 1 + (len(x) - cfg.frame_len) // cfg.hop
    idx = np.arange(count)[:, None] * cfg.hop + np.arange(cfg.frame_len)[None, :]
    return x[idx] * win


def third_octave_energies(wave_10k, cfg: ThirdOctaveConfig = ThirdOctaveConfig()) -> np.ndarray:
    """One-third-octave band envelopes, shape (15, frames)."""
    x = np.asarray(wave_10k, dtype=np.float64)
    if len(x) < cfg.frame_len:
        raise ValueError(f"signal of {len(x)} samples is shorter than one {cfg.frame_len}-sample frame")
    spec = np.fft.rfft(_stoi_frames(x, cfg), n=cfg.n_fft, axis=-1).T
    obm, *_ = third_octave_bands(cfg)
    return np.sqrt(obm @ (np.abs(spec) ** 2))
