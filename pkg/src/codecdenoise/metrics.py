"""Objective metrics (SNR, SI-SDR, STOI) and the test-set evaluation runner."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio_io import Waveform, read_wav, resample
from .losses import si_sdr_db as _si_sdr_tensor
from .spectral import ThirdOctaveConfig, _stoi_frames, third_octave_energies

log = logging.getLogger(__name__)

CLAMP_DB = 60.0
EPS = 1e-12
STOI_RATE = 10000
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
METRICS = ("si_sdr_db", "stoi", "snr_db")


def _pair(clean, test):
    c = np.asarray(clean.samples if isinstance(clean, Waveform) else clean, dtype=np.float64)
    t = np.asarray(test.samples if isinstance(test, Waveform) else test, dtype=np.float64)
    if c.shape != t.shape:
        raise ValueError(f"length mismatch: clean {c.shape} vs test {t.shape}")
    return c, t


def snr_db(clean, test) -> float:
    """Global SNR of ``test`` against ``clean`` in dB, clamped to +-60."""
    c, t = _pair(clean, test)
    p_clean = np.mean(c * c)
    if p_clean <= 0:
        raise ValueError("clean signal has zero power")
    p_err = np.mean((t - c) ** 2)
    val = 10.0 * np.log10((p_clean + EPS) / (p_err + EPS))
    return float(np.clip(val, -CLAMP_DB, CLAMP_DB))


def si_sdr(clean, test) -> float:
    c, t = _pair(clean, test)
    with ad.no_grad():
        return float(_si_sdr_tensor(t, c).data)


# ------------------------------------------------------------------ STOI


def _to_stoi_rate(x, rate: int) -> np.ndarray:
    if rate == STOI_RATE:
        return np.asarray(x, dtype=np.float64)
    return resample(Waveform(np.asarray(x, dtype=np.float64), rate), STOI_RATE).samples


def _remove_silent_frames(x: np.ndarray, y: np.ndarray, cfg: ThirdOctaveConfig):
    """Drop frames whose clean energy is more than 40 dB below the loudest; overlap-add the rest."""
    xf = _stoi_frames(x, cfg)
    yf = _stoi_frames(y, cfg)
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = energy > energy.max() - STOI_DYN_RANGE_DB
    xf, yf = xf[keep], yf[keep]
    n = len(xf)
    out_len = (n - 1) * cfg.hop + cfg.frame_len
    idx = (np.arange(n)[:, None] * cfg.hop + np.arange(cfg.frame_len)[None, :]).ravel()
    xs = np.bincount(idx, xf.ravel(), minlength=out_len)
    ys = np.bincount(idx, yf.ravel(), minlength=out_len)
    return xs, ys


def stoi(clean, test, sample_rate: int | None = None) -> float:
    """Short-time objective intelligibility of ``test`` against ``clean``.

    Not clamped; values sit in roughly [0, 1].  Raises ValueError when
    fewer than 30 analysis frames (384 ms at 10 kHz) survive.
    """
    if sample_rate is None:
        sample_rate = clean.sample_rate if isinstance(clean, Waveform) else STOI_RATE
    c, t = _pair(clean, test)
    cfg = ThirdOctaveConfig()
    x = _to_stoi_rate(c, sample_rate)
    y = _to_stoi_rate(t, sample_rate)
    min_len = (STOI_SEGMENT - 1) * cfg.hop + cfg.frame_len
    if len(x) < min_len:
        raise ValueError(f"STOI needs at least {min_len} samples at 10 kHz, got {len(x)}")
    x, y = _remove_silent_frames(x, y, cfg)
    if len(x) < min_len:
        raise ValueError("STOI: fewer than 30 non-silent frames")
    xb = third_octave_energies(x, cfg)
    yb = third_octave_energies(y, cfg)
    # (segments, bands, N) sliding windows of N frames
    xs = np.lib.stride_tricks.sliding_window_view(xb, STOI_SEGMENT, axis=1).transpose(1, 0, 2)
    ys = np.lib.stride_tricks.sliding_window_view(yb, STOI_SEGMENT, axis=1).transpose(1, 0, 2)
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    clip = 1.0 + 10.0 ** (-STOI_BETA_DB / 20.0)
    yp = np.minimum(ys * scale, xs * clip)
    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = yp - yp.mean(axis=2, keepdims=True)
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + EPS
    yc /= np.linalg.norm(yc, axis=2, keepdims=True) + EPS
    return float(np.mean(np.sum(xc * yc, axis=2)))


# ------------------------------------------------------------ evaluation


@dataclass
class MetricReport:
    rows: list  # {id, noisy: {...}, denoised: {...}}, sorted by id
    means: dict  # condition -> metric -> mean
    n_files: int
    subset_seed: int
    n_requested: int
    errors: list = field(default_factory=list)  # {id, error}
    notes: str = "PESQ is not computed; SI-SDR is reported in its place."

    def to_json(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        """Aligned text table with one row per condition."""
        header = ["Condition", "SI-SDR (dB)*", "STOI", "SNR (dB)"]
        names = {"noisy": "Noisy Input", "denoised": "Proposed"}
        lines = []
        for cond in ("noisy", "denoised"):
            if cond in self.means:
                m = self.means[cond]
                lines.append([names[cond], f"{m['si_sdr_db']:.2f}", f"{m['stoi']:.3f}", f"{m['snr_db']:.2f}"])
        widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        out = [fmt(header), "-" * len(fmt(header))] + [fmt(r) for r in lines]
        out.append(f"n = {self.n_files} files (seed {self.subset_seed}); * SI-SDR replaces PESQ")
        return "\n".join(out)


def file_metrics(clean: Waveform, test: Waveform) -> dict:
    return {"si_sdr_db": si_sdr(clean, test), "stoi": stoi(clean, test), "snr_db": snr_db(clean, test)}


def select_subset(entries: list, n: int, seed: int) -> list:
    """Uniform random subset of size min(n, len) without replacement, sorted by id."""
    if n < 1:
        raise ValueError("n must be >= 1")
    entries = sorted(entries, key=lambda e: e.id)
    if len(entries) <= n:
        return entries
    pick = np.random.default_rng(seed).choice(len(entries), size=n, replace=False)
    return [entries[i] for i in sorted(pick)]


def evaluate(entries: list, root, model=None, n: int = 1000, seed: int = 0) -> MetricReport:
    """Score noisy inputs, and denoised outputs when ``model`` is given, against clean.

    ``entries`` are test-split manifest entries with paths relative to
    ``root``.  Files that fail to load or score are listed in
    ``errors`` and left out of the means.
    """
    if not entries:
        raise ValueError("test split is empty")
    root = Path(root)
    chosen = select_subset(entries, n, seed)
    rows, errors = [], []
    for e in chosen:
        try:
            clean = read_wav(root / e.clean)
            noisy = read_wav(root / e.noisy)
            row = {"id": e.id, "noisy": file_metrics(clean, noisy)}
            if model is not None:
                row["denoised"] = file_metrics(clean, denoise_wave(model, noisy))
        except (OSError, ValueError) as exc:
            log.warning("evaluation of %s failed: %s", e.id, exc)
            errors.append({"id": e.id, "error": str(exc)})
            continue
        rows.append(row)
    if not rows:
        raise RuntimeError(f"every evaluated file failed ({len(errors)} errors)")
    conds = ["noisy"] + (["denoised"] if model is not None else [])
    means = {c: {m: float(np.mean([r[c][m] for r in rows])) for m in METRICS} for c in conds}
    return MetricReport(rows, means, len(rows), seed, n, errors)


def denoise_wave(model, wave: Waveform) -> Waveform:
    rate = model.codec.sample_rate
    x = wave if wave.sample_rate == rate else resample(wave, rate)
    y = Waveform(model.denoise(x.samples), rate)
    if wave.sample_rate == rate:
        return y
    y = resample(y, wave.sample_rate)
    out = np.zeros(len(wave), np.float32)
    out[: min(len(y), len(wave))] = y.samples[: len(wave)]
    return Waveform(out, wave.sample_rate)


def write_report(report: MetricReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2))
