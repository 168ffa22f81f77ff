"""Degradations (additive noise, reverb, noise-cancellation artifacts) and
paired-dataset generation with a JSONL provenance manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio_io import DEFAULT_CHUNK, DEFAULT_RATE, AudioChunk, Waveform, chunk, read_wav, resample, write_wav
from .errors import ConfigError
from .spectral import StftConfig, _frame_index, hann, stft

log = logging.getLogger(__name__)

RT60_DECAY = 6.908  # ln(10^3): amplitude falls by 60 dB over one RT60


class DegenerateInputError(ValueError):
    """A signal that must carry energy is silent."""


class DegradationKind(str, Enum):
    WhiteNoise = "WhiteNoise"
    ExternalNoise = "ExternalNoise"
    SyntheticReverb = "SyntheticReverb"
    RirReverb = "RirReverb"
    NcArtifact = "NcArtifact"

    @property
    def additive(self) -> bool:
        return self in (DegradationKind.WhiteNoise, DegradationKind.ExternalNoise)


ADDITIVE = (DegradationKind.WhiteNoise, DegradationKind.ExternalNoise)


@dataclass
class DegradationRecord:
    kind: DegradationKind
    params: dict = field(default_factory=dict)
    source: str | None = None

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "params": self.params, "source": self.source}

    @classmethod
    def from_json(cls, d: dict) -> "DegradationRecord":
        return cls(DegradationKind(d["kind"]), dict(d["params"]), d.get("source"))


@dataclass
class ManifestEntry:
    id: str
    clean: str
    noisy: str
    split: str
    degradations: list[DegradationRecord]
    snr_db: float | None
    seed: int
    sample_rate: int
    chunk_len: int

    def __post_init__(self):
        if not 1 <= len(self.degradations) <= 2:
            raise ValueError(f"{self.id}: expected 1 or 2 degradations")
        has_additive = any(r.kind.additive for r in self.degradations)
        if has_additive != (self.snr_db is not None):
            raise ValueError(f"{self.id}: snr_db must be set exactly when additive noise is applied")
        if self.snr_db is not None and not 0.0 <= self.snr_db <= 15.0 + 1e-9:
            raise ValueError(f"{self.id}: snr_db {self.snr_db} outside [0, 15]")
        if self.clean == self.noisy:
            raise ValueError(f"{self.id}: clean and noisy paths coincide")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "clean": self.clean,
            "noisy": self.noisy,
            "split": self.split,
            "degradations": [r.to_json() for r in self.degradations],
            "snr_db": self.snr_db,
            "seed": self.seed,
            "sample_rate": self.sample_rate,
            "chunk_len": self.chunk_len,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ManifestEntry":
        return cls(
            id=d["id"],
            clean=d["clean"],
            noisy=d["noisy"],
            split=d["split"],
            degradations=[DegradationRecord.from_json(r) for r in d["degradations"]],
            snr_db=d["snr_db"],
            seed=int(d["seed"]),
            sample_rate=int(d["sample_rate"]),
            chunk_len=int(d["chunk_len"]),
        )


@dataclass
class DatasetConfig:
    clean_dirs: list = field(default_factory=list)
    noise_dirs: list = field(default_factory=list)
    rir_dirs: list = field(default_factory=list)
    variants_per_chunk: int = 3
    snr_range_db: tuple = (0.0, 15.0)
    global_seed: int = 0
    splits: tuple = (0.8, 0.1, 0.1)
    sample_rate: int = DEFAULT_RATE
    chunk_len: int = DEFAULT_CHUNK
    kinds: tuple = tuple(k.value for k in DegradationKind)
    rt60_range_s: tuple = (0.2, 1.2)
    drr_range_db: tuple = (0.0, 10.0)

    def __post_init__(self):
        if self.variants_per_chunk < 1:
            raise ConfigError("variants_per_chunk must be >= 1")
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) < 0:
            raise ConfigError(f"splits must be three non-negative fractions summing to 1, got {self.splits}")
        lo, hi = self.snr_range_db
        if not 0.0 <= lo <= hi <= 15.0:
            raise ConfigError(f"snr_range_db must lie within [0, 15], got {self.snr_range_db}")
        try:
            kinds = [DegradationKind(k) for k in self.kinds]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not kinds or len(set(kinds)) != len(kinds):
            raise ConfigError(f"kinds must be a non-empty list without repeats, got {self.kinds}")
        r0, r1 = self.rt60_range_s
        if not 0.1 <= r0 <= r1 <= 3.0:
            raise ConfigError(f"rt60_range_s must lie within [0.1, 3.0], got {self.rt60_range_s}")

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


# ----------------------------------------------------------- primitives


def white_noise(seed: int, n: int) -> Waveform:
    """Unit-variance i.i.d. Gaussian noise (sample rate is a placeholder)."""
    if n <= 0:
        raise ValueError("n must be positive")
    return Waveform(np.random.default_rng(seed).standard_normal(n), DEFAULT_RATE)


def fit_length(x: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    """Tile ``x`` cyclically and take ``n`` samples starting at ``offset``."""
    if len(x) == 0:
        raise DegenerateInputError("cannot tile an empty signal")
    idx = (offset + np.arange(n)) % len(x)
    return x[idx]


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """clean + g * noise with g chosen so the clean/noise power ratio is ``snr_db``."""
    c = np.asarray(clean.samples, dtype=np.float64)
    v = np.asarray(noise.samples, dtype=np.float64)
    if c.shape != v.shape:
        raise ValueError(f"clean and noise lengths differ: {len(c)} vs {len(v)}")
    p_clean = np.mean(c * c)
    p_noise = np.mean(v * v)
    if p_clean <= 0 or p_noise <= 0:
        raise DegenerateInputError("mix_at_snr needs non-silent clean and noise signals")
    g = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    dtype = np.result_type(clean.samples.dtype, noise.samples.dtype, np.float32)
    return Waveform((c + g * v).astype(dtype), clean.sample_rate)


def synth_rir(
    seed: int,
    rt60_s: float,
    sample_rate: int = DEFAULT_RATE,
    drr_db: float = 0.0,
    predelay_s: float = 0.003,
) -> Waveform:
    """Exponentially decaying Gaussian-noise impulse response.

    h[0] = 1 is the direct path; the tail from ``predelay_s`` on decays by
    60 dB at ``rt60_s`` and is scaled so direct-to-reverberant energy is
    ``drr_db``.  Length is 1.5 * rt60_s * sample_rate.
    """
    if not 0.1 <= rt60_s <= 3.0:
        raise ValueError(f"rt60_s must be in [0.1, 3.0], got {rt60_s}")
    n = int(round(1.5 * rt60_s * sample_rate))
    start = max(1, int(round(predelay_s * sample_rate)))
    rng = np.random.default_rng(seed)
    idx = np.arange(start, n)
    tail = rng.standard_normal(len(idx)) * np.exp(-RT60_DECAY * idx / (rt60_s * sample_rate))
    sigma = np.sqrt(10.0 ** (-drr_db / 10.0) / np.sum(tail * tail))
    h = np.zeros(n)
    h[0] = 1.0
    h[start:] = sigma * tail
    return Waveform(h, sample_rate)


def apply_reverb(wave: Waveform, rir: Waveform) -> Waveform:
    """Linear convolution truncated to the input length, peak-limited to 0.999."""
    if len(wave) == 0 or len(rir) == 0:
        raise ValueError("apply_reverb needs non-empty signals")
    if wave.sample_rate != rir.sample_rate:
        raise ValueError(f"sample rates differ: {wave.sample_rate} vs {rir.sample_rate}")
    y = fftconvolve(np.asarray(wave.samples, dtype=np.float64), np.asarray(rir.samples, dtype=np.float64))[: len(wave)]
    peak = np.max(np.abs(y))
    if peak > 0.999:
        y *= 0.999 / peak
    return Waveform(y.astype(np.result_type(wave.samples.dtype, np.float32)), wave.sample_rate)


# -------------------------------------------------------- NC artifacts

NC_STFT = StftConfig(1024, 256)


def attenuate_segments(x: np.ndarray, sample_rate: int, segments, fade_s: float = 0.010) -> np.ndarray:
    """Apply gain dips; ``segments`` is a list of (start_s, dur_s, gain).

    Each dip ramps linearly over ``fade_s`` at both ends.  Overlapping dips
    take the lower gain rather than compounding.
    """
    n = len(x)
    env = np.ones(n)
    t = np.arange(n)
    fade = max(1, int(round(fade_s * sample_rate)))
    for start_s, dur_s, gain in segments:
        a = int(round(start_s * sample_rate))
        b = min(n, a + int(round(dur_s * sample_rate)))
        ramp_in = np.clip((t - a) / fade, 0.0, 1.0)
        ramp_out = np.clip((b - t) / fade, 0.0, 1.0)
        depth = np.minimum(ramp_in, ramp_out)
        env = np.minimum(env, 1.0 - (1.0 - gain) * depth)
    return x * env


def istft(spec: np.ndarray, length: int, cfg: StftConfig = NC_STFT) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`codecdenoise.spectral.stft`."""
    frames = np.fft.irfft(spec.T, n=cfg.n_fft, axis=-1)
    w = hann(cfg.n_fft)
    idx = _frame_index(length, cfg)
    num = np.bincount(idx.ravel(), weights=(frames * w).ravel(), minlength=length)
    den = np.bincount(idx.ravel(), weights=np.broadcast_to(w * w, idx.shape).ravel(), minlength=length)
    return num / np.maximum(den, 1e-12)


def suppress_bands(x: np.ndarray, sample_rate: int, bands, cfg: StftConfig = NC_STFT) -> np.ndarray:
    """Attenuate frequency bands by STFT magnitude masking, keeping the phase.

    ``bands`` is a list of (center_hz, width_octaves, attenuation_db).
    """
    if len(x) < 2:
        return np.array(x, dtype=np.float64)
    spec = stft(np.asarray(x, dtype=np.float64), cfg)
    freqs = np.arange(spec.shape[0]) * sample_rate / cfg.n_fft
    mask = np.ones(len(freqs))
    for center, width, atten in bands:
        lo, hi = center * 2.0 ** (-width / 2), center * 2.0 ** (width / 2)
        mask[(freqs >= lo) & (freqs <= hi)] *= 10.0 ** (-atten / 20.0)
    return istft(spec * mask[:, None], len(x), cfg)


def nc_artifacts(wave: Waveform, seed: int, return_params: bool = False):
    """Imitate cheap noise cancellation: random gain dips plus band suppression.

    1-4 dips of 50-400 ms at gain 0.1-0.7 with 10 ms fades, then 1-3 bands
    (log-uniform center 200 Hz-16 kHz, 1/3-1 octave wide) cut by 20-40 dB.
    """
    if len(wave) == 0:
        raise ValueError("nc_artifacts needs a non-empty signal")
    sr = wave.sample_rate
    n = len(wave)
    rng = np.random.default_rng(seed)
    segments = []
    for _ in range(int(rng.integers(1, 5))):
        dur = min(rng.uniform(0.05, 0.4), n / sr)
        start = rng.uniform(0.0, n / sr - dur)
        segments.append((start, dur, rng.uniform(0.1, 0.7)))
    top = min(16_000.0, 0.45 * sr)
    bands = []
    for _ in range(int(rng.integers(1, 4))):
        center = float(np.exp(rng.uniform(np.log(200.0), np.log(top))))
        bands.append((center, rng.uniform(1 / 3, 1.0), rng.uniform(20.0, 40.0)))

    y = attenuate_segments(np.asarray(wave.samples, dtype=np.float64), sr, segments)
    y = suppress_bands(y, sr, bands)
    out = Waveform(y.astype(np.result_type(wave.samples.dtype, np.float32)), sr)
    if not return_params:
        return out
    params = {"seed": seed, "n_segments": len(segments), "n_bands": len(bands)}
    for i, (s, d, g) in enumerate(segments):
        params.update({f"seg{i}_start_s": s, f"seg{i}_dur_s": d, f"seg{i}_gain": g})
    for i, (c, w, a) in enumerate(bands):
        params.update({f"band{i}_center_hz": c, f"band{i}_width_oct": w, f"band{i}_atten_db": a})
    return out, params


# --------------------------------------------------- chunk degradation


def _audio_files(dirs) -> list[Path]:
    return sorted(p for d in dirs for p in Path(d).rglob("*") if p.suffix.lower() == ".wav" and p.is_file())


@lru_cache(maxsize=256)
def _load_resampled(path: str, rate: int) -> np.ndarray:
    w = read_wav(path)
    if w.sample_rate != rate:
        w = resample(w, rate)
    out = np.asarray(w.samples, dtype=np.float64)
    out.setflags(write=False)
    return out


def _draw(cfg: DatasetConfig, rng: np.random.Generator, noise_files, rir_files) -> list[DegradationRecord]:
    pool = [DegradationKind(k) for k in cfg.kinds]
    count = 1 if len(pool) == 1 or rng.random() < 0.5 else 2
    picked = [pool[i] for i in rng.choice(len(pool), size=count, replace=False)]
    records: list[DegradationRecord] = []
    for kind in picked:
        sub_seed = int(rng.integers(2**62))
        if kind is DegradationKind.ExternalNoise and not noise_files:
            kind = DegradationKind.WhiteNoise
        if kind is DegradationKind.RirReverb and not rir_files:
            kind = DegradationKind.SyntheticReverb
        if any(r.kind is kind for r in records):
            continue
        rec = DegradationRecord(kind, {"seed": sub_seed})
        if kind is DegradationKind.ExternalNoise:
            rec.source = str(noise_files[int(rng.integers(len(noise_files)))])
        elif kind is DegradationKind.RirReverb:
            rec.source = str(rir_files[int(rng.integers(len(rir_files)))])
        elif kind is DegradationKind.SyntheticReverb:
            rec.params["rt60_s"] = float(rng.uniform(*cfg.rt60_range_s))
            rec.params["drr_db"] = float(rng.uniform(*cfg.drr_range_db))
        records.append(rec)
    # additive noise always goes last
    return [r for r in records if not r.kind.additive] + [r for r in records if r.kind.additive]


def apply_degradations(wave: Waveform, records: list[DegradationRecord], snr_db: float | None) -> Waveform:
    """Replay ``records`` in order; this is the whole of the degradation path."""
    sr = wave.sample_rate
    y = wave
    noises = []
    for rec in records:
        seed = int(rec.params["seed"])
        if rec.kind is DegradationKind.WhiteNoise:
            noises.append(white_noise(seed, len(y)).samples)
        elif rec.kind is DegradationKind.ExternalNoise:
            src = _load_resampled(rec.source, sr)
            if "offset" not in rec.params:
                rec.params["offset"] = int(np.random.default_rng(seed).integers(len(src)))
            noises.append(fit_length(src, len(y), int(rec.params["offset"])))
        elif rec.kind is DegradationKind.SyntheticReverb:
            rir = synth_rir(seed, rec.params["rt60_s"], sr, rec.params["drr_db"])
            y = apply_reverb(y, rir)
        elif rec.kind is DegradationKind.RirReverb:
            y = apply_reverb(y, Waveform(_load_resampled(rec.source, sr), sr))
        elif rec.kind is DegradationKind.NcArtifact:
            y, drawn = nc_artifacts(y, seed, return_params=True)
            rec.params.update(drawn)
    if noises:
        if snr_db is None:
            raise ValueError("additive degradation without an SNR")
        total = np.zeros(len(y))
        for v in noises:
            p = np.mean(v * v)
            if p <= 0:
                raise DegenerateInputError("noise source is silent")
            total += v / np.sqrt(p)
        y = mix_at_snr(y, Waveform(total, sr), snr_db)
    return y


def degrade_chunk(chunk: AudioChunk | Waveform, seed: int, config: DatasetConfig):
    """Degrade one chunk with one or two distinct kinds drawn from ``config.kinds``.

    Returns (noisy Waveform, records, snr_db); ``snr_db`` is drawn from
    ``config.snr_range_db`` only when additive noise is among the kinds.
    """
    wave = chunk.wave if isinstance(chunk, AudioChunk) else chunk
    rng = np.random.default_rng(seed)
    records = _draw(config, rng, _audio_files(config.noise_dirs), _audio_files(config.rir_dirs))
    snr = float(rng.uniform(*config.snr_range_db)) if any(r.kind.additive for r in records) else None
    noisy = apply_degradations(wave, records, snr)
    return noisy, records, snr


# ------------------------------------------------------------- dataset


def stable_hash(*parts) -> int:
    """63-bit seed from a blake2b digest of the parts' string forms."""
    digest = hashlib.blake2b("|".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def split_files(files, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, list]:
    """Seeded shuffle, then contiguous train/val/test partition of whole files."""
    files = list(files)
    if len(files) < 3:
        raise ConfigError(f"need at least 3 files to split, got {len(files)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(files))
    shuffled = [files[i] for i in order]
    n_train = int(round(fractions[0] * len(files)))
    n_val = int(round(fractions[1] * len(files)))
    n_val = min(n_val, len(files) - n_train)
    return {
        "train": shuffled[:n_train],
        "val": shuffled[n_train : n_train + n_val],
        "test": shuffled[n_train + n_val :],
    }


def _file_tag(key: str) -> str:
    stem = re.sub(r"[^A-Za-z0-9]+", "-", Path(key).stem).strip("-")[:40] or "file"
    return f"{stem}-{hashlib.blake2b(key.encode(), digest_size=4).hexdigest()}"


def _process_file(key: str, path: Path, split: str, cfg: DatasetConfig, out: Path) -> list[ManifestEntry]:
    wave = read_wav(path)
    if wave.sample_rate != cfg.sample_rate:
        log.info("resampling %s from %d Hz to %d Hz", path, wave.sample_rate, cfg.sample_rate)
        wave = resample(wave, cfg.sample_rate)
    tag = _file_tag(key)
    entries = []
    for ci, ch in enumerate(chunk(wave, cfg.chunk_len, source_file=key)):
        clean_rel = f"clean/{tag}_c{ci:04d}.wav"
        write_wav(out / clean_rel, Waveform(ch.wave.samples.astype(np.float32), cfg.sample_rate))
        for v in range(cfg.variants_per_chunk):
            seed = stable_hash(cfg.global_seed, key, ch.offset_samples, v)
            noisy, records, snr = degrade_chunk(ch, seed, cfg)
            eid = f"{tag}_c{ci:04d}_v{v}"
            noisy_rel = f"noisy/{eid}.wav"
            write_wav(out / noisy_rel, Waveform(noisy.samples.astype(np.float32), cfg.sample_rate))
            entries.append(ManifestEntry(eid, clean_rel, noisy_rel, split, records, snr, seed, cfg.sample_rate, cfg.chunk_len))
    return entries


def build_dataset(config: DatasetConfig, out_dir, threads: int = 1) -> list[ManifestEntry]:
    """Chunk every clean file, write clean/noisy WAVs and ``manifest.jsonl``.

    Splits are assigned per source file.  Per-variant seeds hash
    (global_seed, file key, chunk offset, variant) so results do not depend
    on traversal order or thread count.
    """
    if not config.clean_dirs:
        raise ConfigError("no clean_dirs configured")
    keyed = {}
    for di, d in enumerate(config.clean_dirs):
        for p in _audio_files([d]):
            keyed[f"{di}/{p.relative_to(d).as_posix()}"] = p
    if not keyed:
        raise ConfigError(f"no .wav files found under {list(map(str, config.clean_dirs))}")
    noise_set = {p.resolve() for p in _audio_files(config.noise_dirs)}

    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "noisy").mkdir(parents=True, exist_ok=True)
    splits = split_files(sorted(keyed), config.splits, config.global_seed) if len(keyed) >= 3 else {"train": sorted(keyed), "val": [], "test": []}
    split_of = {k: s for s, ks in splits.items() for k in ks}
    jobs = [(k, keyed[k], split_of[k]) for k in sorted(keyed) if keyed[k].resolve() not in noise_set]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda j: _process_file(*j, config, out), jobs))
    else:
        results = [_process_file(*j, config, out) for j in jobs]
    entries = sorted((e for r in results for e in r), key=lambda e: e.id)
    write_manifest(out / "manifest.jsonl", entries)
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_json(), ensure_ascii=False) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, encoding="utf-8") as fh:
        return [ManifestEntry.from_json(json.loads(line)) for line in fh if line.strip()]
