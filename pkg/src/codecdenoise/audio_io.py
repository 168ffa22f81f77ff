"""Mono waveforms, WAV (RIFF) read/write, chunking, resampling, test tones."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np

DEFAULT_RATE = 44_100
DEFAULT_CHUNK = 2 * DEFAULT_RATE

_PCM = 0x0001
_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


class WavFormatError(ValueError):
    """The file is not a well-formed RIFF/WAVE file."""


class UnsupportedWavError(WavFormatError):
    """Well-formed WAV, but an encoding this reader does not handle."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ValueError(f"Waveform is mono; got samples of shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Waveform samples must be finite")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class AudioChunk:
    wave: Waveform
    source_file: str
    offset_samples: int


# ------------------------------------------------------------------ WAV


def read_wav(path) -> Waveform:
    """Read PCM-16/24/32 or float32 WAV; multichannel is averaged to mono."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _EXTENSIBLE:
                if size < 40:
                    raise WavFormatError(f"{path}: truncated WAVE_FORMAT_EXTENSIBLE header")
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1 or block_align != channels * bits // 8:
        raise WavFormatError(f"{path}: inconsistent fmt header")
    n_frames = len(data) // block_align
    data = data[: n_frames * block_align]

    if tag == _FLOAT and bits == 32:
        x = np.frombuffer(data, dtype="<f4").astype(np.float32)
    elif tag == _PCM and bits == 16:
        x = np.frombuffer(data, dtype="<i2").astype(np.float32) / np.float32(2**15)
    elif tag == _PCM and bits == 32:
        x = (np.frombuffer(data, dtype="<i4").astype(np.float64) / 2.0**31).astype(np.float32)
    elif tag == _PCM and bits == 24:
        b = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = (v / float(1 << 23)).astype(np.float32)
    else:
        raise UnsupportedWavError(f"{path}: format tag {tag:#06x} with {bits} bits is not supported")

    x = x.reshape(n_frames, channels)
    x = x[:, 0].copy() if channels == 1 else x.mean(axis=1, dtype=np.float64).astype(np.float32)
    return Waveform(x, int(rate))


def write_wav(path, wave: Waveform, format: str = "float32") -> None:
    """Write mono WAV.  ``format`` is ``"float32"`` (lossless) or ``"pcm16"``."""
    x = np.asarray(wave.samples)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot write non-finite samples")
    if format == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    elif format == "pcm16":
        scaled = np.clip(x.astype(np.float64), -1.0, 1.0) * 32768.0
        # round half away from zero, then saturate at the top code
        q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
        payload = np.clip(q, -32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    else:
        raise ValueError(f"unknown WAV format {format!r}")

    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, wave.sample_rate, wave.sample_rate * block, block, bits)
    pad = b"\x00" if len(payload) & 1 else b""
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload + pad
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ------------------------------------------------------------- chunking


def chunk(wave: Waveform, chunk_len: int = DEFAULT_CHUNK, hop: int | None = None, source_file: str = "") -> list[AudioChunk]:
    """Cut fixed-length chunks; a trailing remainder shorter than ``chunk_len`` is dropped."""
    hop = chunk_len if hop is None else hop
    if chunk_len <= 0 or hop <= 0:
        raise ValueError("chunk_len and hop must be positive")
    n = len(wave)
    if n < chunk_len:
        return []
    return [
        AudioChunk(Waveform(wave.samples[o : o + chunk_len].copy(), wave.sample_rate), source_file, o)
        for o in range(0, n - chunk_len + 1, hop)
    ]


# ----------------------------------------------------------- resampling


def _kaiser_sinc_bank(up: int, down: int, taps: int, beta: float) -> tuple[np.ndarray, int]:
    """Polyphase bank of shape (up, 2 * half) and the half-width in input samples."""
    cutoff = min(1.0, up / down)
    half = int(np.ceil(taps / cutoff))
    j = np.arange(-half + 1, half + 1)
    phase = np.arange(up)[:, None] / up
    tau = j[None, :] - phase
    window = np.i0(beta * np.sqrt(np.clip(1.0 - (tau / half) ** 2, 0.0, None))) / np.i0(beta)
    bank = cutoff * np.sinc(cutoff * tau) * window
    bank /= bank.sum(axis=1, keepdims=True)
    return bank, half


def resample(wave: Waveform, target_rate: int, taps: int = 64, beta: float = 8.6) -> Waveform:
    """Kaiser-windowed sinc resampling (polyphase).

    ``taps`` zero crossings per side at the lower of the two rates.  Output
    length is round(len * target / source).  Each phase filter is normalised
    to unit DC gain.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    src = wave.sample_rate
    if target_rate == src:
        return Waveform(wave.samples.copy(), src)
    g = gcd(src, target_rate)
    up, down = target_rate // g, src // g
    x = np.asarray(wave.samples, dtype=np.float64)
    n_out = int(round(len(x) * target_rate / src))
    bank, half = _kaiser_sinc_bank(up, down, taps, beta)
    xp = np.pad(x, (half, half + 1))
    offsets = np.arange(-half + 1, half + 1) + half

    out = np.empty(n_out)
    block = 4096
    for start in range(0, n_out, block):
        n = np.arange(start, min(start + block, n_out))
        base, ph = np.divmod(n * down, up)
        idx = base[:, None] + offsets[None, :]
        out[start : start + len(n)] = np.einsum("ij,ij->i", xp[idx], bank[ph])
    return Waveform(out.astype(wave.samples.dtype if np.issubdtype(wave.samples.dtype, np.floating) else np.float32), target_rate)


# ---------------------------------------------------------- test signals


def synth_tone_mix(seed: int, duration_s: float, sample_rate: int = DEFAULT_RATE, peak: float = 0.7) -> Waveform:
    """Harmonic tone with slow amplitude modulation, used as a clean music stand-in.

    A random f0 in [110, 880] Hz carries 3 to 6 harmonics; each harmonic gets
    its own 2-8 Hz AM envelope.  The result is peak-normalised to ``peak``.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(110.0, 880.0)
    n_harm = int(rng.integers(3, 7))
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        amp = rng.uniform(0.3, 1.0) / k
        rate = rng.uniform(2.0, 8.0)
        depth = rng.uniform(0.2, 0.8)
        env = 1.0 - depth * 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        x += amp * env * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
    x *= peak / np.max(np.abs(x))
    return Waveform(x.astype(np.float32), sample_rate)
