"""Frozen codec stand-ins: waveform <-> (channels, frames) latents.

Two codecs share one interface.  ``IdentityFrameCodec`` just reshapes
hop-sized blocks into columns and is exactly invertible.
``ToyConvCodec`` is a small strided-conv autoencoder that is pretrained
on clean audio, then frozen; gradients still flow through its decoder.

Optional residual vector quantization (:func:`rvq_quantize`) can be
applied to latent frames but is not on the denoising path.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .audio_io import DEFAULT_RATE, Waveform
from .errors import ConfigError
from .losses import l1_waveform, mel_loss, si_sdr_db
from .optim import OptimState, adamw_step
from .spectral import MelConfig, StftConfig

log = logging.getLogger(__name__)

STD_FLOOR = 1e-5


@dataclass
class Latent:
    values: np.ndarray  # (C_lat, F)
    hop: int
    original_len: int

    def __post_init__(self):
        frames = -(-self.original_len // self.hop)
        if self.values.ndim != 2 or self.values.shape[1] != frames:
            raise ValueError(f"latent of shape {self.values.shape} does not match {self.original_len} samples at hop {self.hop}")


@dataclass
class RvqSpec:
    stages: int = 4
    codebook_size: int = 256


@dataclass
class CodecSpec:
    kind: str = "IdentityFrame"  # or "ToyConv"
    hop: int = 64
    c_lat: int | None = None  # IdentityFrame: defaults to hop; ToyConv: 32
    sample_rate: int = DEFAULT_RATE
    rvq: RvqSpec | None = None

    def __post_init__(self):
        if self.kind not in ("IdentityFrame", "ToyConv"):
            raise ConfigError(f"unknown codec kind {self.kind!r}")
        if self.hop < 1:
            raise ConfigError("hop must be >= 1")
        if self.kind == "IdentityFrame":
            if self.c_lat not in (None, self.hop):
                raise ConfigError("IdentityFrame codec has c_lat == hop")
            self.c_lat = self.hop
        else:
            if self.hop != 64:
                raise ConfigError("ToyConv codec has a fixed hop of 64 (strides 4, 4, 4)")
            self.c_lat = 32 if self.c_lat is None else self.c_lat


def n_latent_frames(length: int, hop: int) -> int:
    return -(-length // hop)


class IdentityFrameCodec:
    def __init__(self, spec: CodecSpec):
        self.spec = spec
        self.hop = spec.hop
        self.c_lat = spec.c_lat
        self.sample_rate = spec.sample_rate
        self.params: dict[str, ad.Tensor] = {}

    def encode_array(self, x: np.ndarray) -> np.ndarray:
        """(B, T) -> (B, hop, F)."""
        x = np.atleast_2d(np.asarray(x))
        b, t = x.shape
        if t == 0:
            raise ValueError("cannot encode an empty waveform")
        f = n_latent_frames(t, self.hop)
        padded = np.pad(x, ((0, 0), (0, f * self.hop - t)))
        return np.ascontiguousarray(padded.reshape(b, f, self.hop).transpose(0, 2, 1))

    def decode_tensor(self, z: ad.Tensor, original_len: int) -> ad.Tensor:
        """(B, hop, F) tensor -> (B, original_len) tensor."""
        b, c, f = z.shape
        if c != self.hop:
            raise ad.ShapeError(f"latent has {c} channels, codec expects {self.hop}")
        flat = ad.reshape(ad.transpose(z, (0, 2, 1)), (b, f * self.hop))
        return ad.crop_time(flat, 0, original_len)

    def encode(self, wave: Waveform) -> Latent:
        _check_rate(wave, self.sample_rate)
        return Latent(self.encode_array(wave.samples)[0], self.hop, len(wave))

    def decode(self, latent: Latent) -> Waveform:
        with ad.no_grad():
            y = self.decode_tensor(ad.Tensor(latent.values[None]), latent.original_len)
        return Waveform(y.data[0], self.sample_rate)

    def checksum(self) -> str:
        return _checksum(self.params)


_TOY_K, _TOY_STRIDE, _TOY_PAD = 8, 4, 2


class ToyConvCodec:
    """Three stride-4 convs (1 -> 16 -> 32 -> C_lat, K = 8, SiLU between) and a mirrored decoder."""

    def __init__(self, spec: CodecSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.hop = spec.hop
        self.c_lat = spec.c_lat
        self.sample_rate = spec.sample_rate
        rng = np.random.default_rng(seed)
        chans = [1, 16, 32, self.c_lat]
        self.params = {}
        for i in range(3):
            cin, cout = chans[i], chans[i + 1]
            bound = np.sqrt(6.0 / (cin * _TOY_K))
            self.params[f"enc{i}.w"] = ad.Tensor(rng.uniform(-bound, bound, (cout, cin, _TOY_K)).astype(dtype))
            self.params[f"enc{i}.b"] = ad.Tensor(np.zeros(cout, dtype))
        for i in range(3):
            cin, cout = chans[3 - i], chans[2 - i]
            bound = np.sqrt(6.0 / (cin * _TOY_K / _TOY_STRIDE))
            self.params[f"dec{i}.w"] = ad.Tensor(rng.uniform(-bound, bound, (cin, cout, _TOY_K)).astype(dtype))
            self.params[f"dec{i}.b"] = ad.Tensor(np.zeros(cout, dtype))
        self.frozen = False

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
        self.frozen = not flag

    def _encode_tensor(self, x: ad.Tensor) -> ad.Tensor:
        h = x
        for i in range(3):
            h = ad.conv1d(h, self.params[f"enc{i}.w"], self.params[f"enc{i}.b"], _TOY_STRIDE, _TOY_PAD)
            if i < 2:
                h = ad.silu(h)
        return h

    def encode_array(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=self.params["enc0.w"].dtype))
        b, t = x.shape
        if t == 0:
            raise ValueError("cannot encode an empty waveform")
        f = n_latent_frames(t, self.hop)
        padded = np.pad(x, ((0, 0), (0, f * self.hop - t)))[:, None, :]
        with ad.no_grad():
            return self._encode_tensor(ad.Tensor(padded)).data

    def decode_tensor(self, z: ad.Tensor, original_len: int) -> ad.Tensor:
        if z.shape[1] != self.c_lat:
            raise ad.ShapeError(f"latent has {z.shape[1]} channels, codec expects {self.c_lat}")
        h = z
        for i in range(3):
            h = ad.conv_transpose1d(h, self.params[f"dec{i}.w"], self.params[f"dec{i}.b"], _TOY_STRIDE, _TOY_PAD)
            if i < 2:
                h = ad.silu(h)
        b = h.shape[0]
        return ad.crop_time(ad.reshape(h, (b, h.shape[2])), 0, original_len)

    def encode(self, wave: Waveform) -> Latent:
        _check_rate(wave, self.sample_rate)
        return Latent(self.encode_array(wave.samples)[0], self.hop, len(wave))

    def decode(self, latent: Latent) -> Waveform:
        with ad.no_grad():
            y = self.decode_tensor(ad.Tensor(latent.values[None].astype(self.params["dec0.w"].dtype)), latent.original_len)
        return Waveform(y.data[0], self.sample_rate)

    def checksum(self) -> str:
        return _checksum(self.params)


def build_codec(spec: CodecSpec, params: dict | None = None, seed: int = 0):
    """Construct a codec; ``params`` (name -> array) restores saved ToyConv weights, frozen."""
    if spec.kind == "IdentityFrame":
        return IdentityFrameCodec(spec)
    codec = ToyConvCodec(spec, seed)
    if params is not None:
        for k, v in params.items():
            codec.params[k] = ad.Tensor(np.array(v, dtype=np.float32))
        codec.set_trainable(False)
    return codec


def _check_rate(wave: Waveform, rate: int) -> None:
    if wave.sample_rate != rate:
        raise ValueError(f"codec runs at {rate} Hz, got {wave.sample_rate} Hz")


def _checksum(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------- latent statistics


@dataclass
class LatentStats:
    mean: np.ndarray
    std: np.ndarray


def fit_latent_stats(latents) -> LatentStats:
    """Per-channel mean/std over every frame of every latent ((C, F) or (B, C, F))."""
    cols = []
    for z in latents:
        z = np.asarray(z.values if isinstance(z, Latent) else z, dtype=np.float64)
        cols.append(z.reshape(-1, z.shape[-2], z.shape[-1]).transpose(1, 0, 2).reshape(z.shape[-2], -1))
    if not cols:
        raise ValueError("need at least one latent")
    allz = np.concatenate(cols, axis=1)
    mean = allz.mean(axis=1)
    std = allz.std(axis=1)
    low = std < STD_FLOOR
    if low.any():
        log.warning("%d latent channel(s) have near-zero variance; std clamped to %g", int(low.sum()), STD_FLOOR)
        std = np.maximum(std, STD_FLOOR)
    return LatentStats(mean, std)


def normalize(z, stats: LatentStats):
    """(z - mean) / std per channel; z is (C, F) or (B, C, F)."""
    z = np.asarray(z)
    dt = z.dtype if np.issubdtype(z.dtype, np.floating) else np.float64
    return ((z - stats.mean[:, None].astype(dt)) / stats.std[:, None].astype(dt)).astype(dt)


def denormalize(z, stats: LatentStats):
    """Inverse of :func:`normalize`; differentiable when ``z`` is a Tensor."""
    if isinstance(z, ad.Tensor):
        dt = z.dtype
        return z * stats.std[:, None].astype(dt) + stats.mean[:, None].astype(dt)
    z = np.asarray(z)
    dt = z.dtype if np.issubdtype(z.dtype, np.floating) else np.float64
    return (z * stats.std[:, None].astype(dt) + stats.mean[:, None].astype(dt)).astype(dt)


# ------------------------------------------------------------------ RVQ


def rvq_quantize(vector: np.ndarray, codebooks) -> tuple[np.ndarray, np.ndarray]:
    """Greedy residual VQ of one vector.

    ``codebooks`` is a sequence of (size, dim) arrays, one per stage.  Each
    stage picks the codeword nearest (Euclidean) to the running residual.
    Returns (codes, quantized vector).  The residual norm is non-increasing
    across stages whenever every codebook contains the zero vector, as the
    ones from :func:`train_rvq` do.
    """
    codes, quant, _ = rvq_quantize_frames(np.asarray(vector)[None, :], codebooks)
    return codes[0], quant[0]


def rvq_quantize_frames(frames: np.ndarray, codebooks):
    """Vectorised RVQ over rows of ``frames`` (N, dim).

    Returns codes (N, stages), quantized (N, dim) and the residual L2 norm
    after each stage, shape (N, stages + 1) (column 0 is the input norm).
    """
    residual = np.asarray(frames, dtype=np.float64).copy()
    quant = np.zeros_like(residual)
    codes = np.zeros((len(residual), len(codebooks)), dtype=np.int64)
    norms = [np.linalg.norm(residual, axis=1)]
    for s, cb in enumerate(codebooks):
        cb = np.asarray(cb, dtype=np.float64)
        if cb.ndim != 2 or cb.shape[1] != residual.shape[1]:
            raise ValueError(f"stage {s} codebook shape {cb.shape} does not match dim {residual.shape[1]}")
        d2 = (residual**2).sum(1)[:, None] - 2 * residual @ cb.T + (cb**2).sum(1)[None, :]
        pick = np.argmin(d2, axis=1)
        chosen = cb[pick]
        # the expanded distance can misrank near-ties; recheck those rows exactly
        worse = np.linalg.norm(residual - chosen, axis=1) > norms[-1]
        if worse.any():
            exact = ((residual[worse, None, :] - cb[None]) ** 2).sum(-1)
            pick[worse] = np.argmin(exact, axis=1)
            chosen = cb[pick]
        codes[:, s] = pick
        quant += chosen
        residual -= chosen
        norms.append(np.linalg.norm(residual, axis=1))
    return codes, quant, np.stack(norms, axis=1)


def train_rvq(frames: np.ndarray, spec: RvqSpec, iters: int = 10, seed: int = 0) -> list[np.ndarray]:
    """Fit stage codebooks by k-means on successive residuals.

    Each codebook also contains the zero vector, so a stage can always
    leave the residual unchanged.
    """
    rng = np.random.default_rng(seed)
    residual = np.asarray(frames, dtype=np.float64).copy()
    books = []
    for _ in range(spec.stages):
        k = min(spec.codebook_size - 1, len(residual))
        cb = residual[rng.choice(len(residual), size=k, replace=False)].copy()
        for _ in range(iters):
            d2 = (residual**2).sum(1)[:, None] - 2 * residual @ cb.T + (cb**2).sum(1)[None, :]
            pick = np.argmin(d2, axis=1)
            for j in range(k):
                members = residual[pick == j]
                if len(members):
                    cb[j] = members.mean(axis=0)
        cb = np.vstack([np.zeros((1, residual.shape[1])), cb])
        books.append(cb)
        _, q, _ = rvq_quantize_frames(residual, [cb])
        residual -= q
    return books


# ------------------------------------------------------ toy pretraining


@dataclass
class ToyCodecTrainConfig:
    steps: int = 1000
    batch: int = 8
    crop_len: int = 8192
    lr: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0
    min_chunks: int = 100
    mel: MelConfig = field(default_factory=lambda: MelConfig(StftConfig(512, 128), n_mels=40))


@dataclass
class ToyCodecReport:
    l1_before: float
    l1_after: float
    history: list


def _recon_l1(codec: ToyConvCodec, clips: np.ndarray) -> float:
    with ad.no_grad():
        z = codec.encode_array(clips)
        y = codec.decode_tensor(ad.Tensor(z), clips.shape[1])
        return float(l1_waveform(y, ad.Tensor(clips)).data)


def pretrain_toy_codec(clean_corpus, config: ToyCodecTrainConfig = ToyCodecTrainConfig(), spec: CodecSpec | None = None):
    """Train the toy autoencoder on random crops of clean chunks, then freeze it.

    Returns (codec, report).  The loss is L1 plus mel L1 on the
    reconstruction.
    """
    chunks = [np.asarray(c.samples if isinstance(c, Waveform) else c, dtype=np.float32) for c in clean_corpus]
    if len(chunks) < config.min_chunks:
        raise ConfigError(f"toy codec pretraining needs >= {config.min_chunks} clean chunks, got {len(chunks)}")
    spec = spec or CodecSpec(kind="ToyConv", hop=64)
    codec = ToyConvCodec(spec, seed=config.seed)
    codec.set_trainable(True)
    rng = np.random.default_rng(config.seed)
    mel_cfg = config.mel if config.mel.sample_rate == spec.sample_rate else MelConfig(
        config.mel.stft, config.mel.n_mels, config.mel.f_min, None, spec.sample_rate
    )

    def crops(n):
        out = np.empty((n, config.crop_len), dtype=np.float32)
        for i in range(n):
            c = chunks[int(rng.integers(len(chunks)))]
            o = int(rng.integers(0, max(1, len(c) - config.crop_len + 1)))
            seg = c[o : o + config.crop_len]
            out[i, : len(seg)] = seg
            out[i, len(seg) :] = 0
        return out

    probe = crops(16)
    before = _recon_l1(codec, probe)
    state = OptimState(lr=config.lr, weight_decay=config.weight_decay)
    history = []
    for step in range(config.steps):
        x = crops(config.batch)
        xt = ad.Tensor(x)
        for p in codec.params.values():
            p.grad = None
        z = codec._encode_tensor(ad.Tensor(x[:, None, :]))
        y = codec.decode_tensor(z, config.crop_len)
        loss = l1_waveform(y, xt) + mel_loss(y, xt, mel_cfg)
        ad.backward(loss)
        adamw_step(codec.params, {k: p.grad for k, p in codec.params.items()}, state)
        history.append(float(loss.data))
        if step % 100 == 0:
            log.info("toy codec step %d loss %.5f", step, history[-1])
    after = _recon_l1(codec, probe)
    codec.set_trainable(False)
    return codec, ToyCodecReport(before, after, history)


def roundtrip_si_sdr(codec, waves) -> float:
    """Mean SI-SDR (dB) of decode(encode(x)) against x."""
    vals = []
    for w in waves:
        x = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float32)
        with ad.no_grad():
            y = codec.decode_tensor(ad.Tensor(codec.encode_array(x)), len(x))
        vals.append(float(si_sdr_db(ad.Tensor(y.data[0].astype(np.float64)), ad.Tensor(x.astype(np.float64))).data))
    return float(np.mean(vals))
