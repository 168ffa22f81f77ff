"""Latent U-Net denoiser over (B, C_lat, F) latent tensors.

stem -> L x [res blocks -> strided down conv] -> bottleneck res blocks ->
L x [transposed up conv -> concat skip -> res blocks] -> output stem.

The down conv doubles the channel count (capped at ``max_channels``), so
the per-level widths are min(base * 2**l, max) and the bottleneck has
min(base * 2**L, max) channels.  A 1x1 bypass conv from the network input
is added to the output stem; the sum is the clean-latent estimate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 64
    base_channels: int = 64
    levels: int = 5
    max_channels: int = 512
    res_blocks_per_level: int = 2
    norm_groups: int = 8
    down_kernel: int = 4
    stem_kernel: int = 3

    def __post_init__(self):
        if self.levels < 1 or self.res_blocks_per_level < 1 or self.in_channels < 1:
            raise ConfigError("levels, res_blocks_per_level and in_channels must be >= 1")
        for c in self.channels() + [self.bottleneck_channels]:
            if c % self.norm_groups:
                raise ConfigError(f"norm_groups={self.norm_groups} does not divide {c} channels")

    def channels(self) -> list[int]:
        """Width of each encoder level, shallowest first."""
        return [min(self.base_channels * 2**lvl, self.max_channels) for lvl in range(self.levels)]

    @property
    def bottleneck_channels(self) -> int:
        return min(self.base_channels * 2**self.levels, self.max_channels)

    @property
    def multiple(self) -> int:
        return 2**self.levels

    def to_json(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------ parameters


def _kaiming(rng, shape, fan_in, dtype):
    # Kaiming-uniform with negative slope sqrt(5), i.e. bound 1/sqrt(fan_in).
    # The ReLU-gain bound sqrt(6/fan_in) compounds through the un-normalized
    # up path and starts the full network ~100x off the target scale.
    bound = 1.0 / np.sqrt(fan_in)
    return ad.Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def _zeros(n, dtype):
    return ad.Tensor(np.zeros(n, dtype), requires_grad=True)


def _ones(n, dtype):
    return ad.Tensor(np.ones(n, dtype), requires_grad=True)


def _res_params(p, prefix, cin, cout, rng, dtype):
    p[f"{prefix}.gn1.g"] = _ones(cin, dtype)
    p[f"{prefix}.gn1.b"] = _zeros(cin, dtype)
    p[f"{prefix}.conv1.w"] = _kaiming(rng, (cout, cin, 3), cin * 3, dtype)
    p[f"{prefix}.conv1.b"] = _zeros(cout, dtype)
    p[f"{prefix}.gn2.g"] = _ones(cout, dtype)
    p[f"{prefix}.gn2.b"] = _zeros(cout, dtype)
    p[f"{prefix}.conv2.w"] = _kaiming(rng, (cout, cout, 3), cout * 3, dtype)
    p[f"{prefix}.conv2.b"] = _zeros(cout, dtype)
    if cin != cout:
        p[f"{prefix}.skip.w"] = _kaiming(rng, (cout, cin, 1), cin, dtype)
        p[f"{prefix}.skip.b"] = _zeros(cout, dtype)


def build_unet(config: UNetConfig, seed: int = 0, dtype=np.float32) -> dict[str, ad.Tensor]:
    """Kaiming-uniform (fan-in, a=sqrt(5)) conv weights, zero biases, GroupNorm gamma 1 / beta 0.

    The extra 1x1 input-to-output bypass conv is initialized to the
    identity; it stays trainable, so the network still predicts the clean
    latent itself.
    """
    rng = np.random.default_rng(seed)
    ch = config.channels()
    k, ks = config.down_kernel, config.stem_kernel
    c_lat = config.in_channels
    p: dict[str, ad.Tensor] = {}
    p["stem.w"] = _kaiming(rng, (ch[0], c_lat, ks), c_lat * ks, dtype)
    p["stem.b"] = _zeros(ch[0], dtype)
    widths = ch + [config.bottleneck_channels]
    for lvl in range(config.levels):
        for r in range(config.res_blocks_per_level):
            _res_params(p, f"enc{lvl}.res{r}", ch[lvl], ch[lvl], rng, dtype)
        p[f"enc{lvl}.down.w"] = _kaiming(rng, (widths[lvl + 1], ch[lvl], k), ch[lvl] * k, dtype)
        p[f"enc{lvl}.down.b"] = _zeros(widths[lvl + 1], dtype)
    for r in range(config.res_blocks_per_level):
        _res_params(p, f"mid.res{r}", widths[-1], widths[-1], rng, dtype)
    for lvl in reversed(range(config.levels)):
        p[f"dec{lvl}.up.w"] = _kaiming(rng, (widths[lvl + 1], ch[lvl], k), widths[lvl + 1] * k // 2, dtype)
        p[f"dec{lvl}.up.b"] = _zeros(ch[lvl], dtype)
        for r in range(config.res_blocks_per_level):
            _res_params(p, f"dec{lvl}.res{r}", 2 * ch[lvl] if r == 0 else ch[lvl], ch[lvl], rng, dtype)
    p["out.w"] = _kaiming(rng, (c_lat, ch[0], ks), ch[0] * ks, dtype)
    p["out.b"] = _zeros(c_lat, dtype)
    # the 1x1 bypass from input to output starts as the identity map
    p["bypass.w"] = ad.Tensor(np.eye(c_lat, dtype=dtype)[:, :, None], requires_grad=True)
    p["bypass.b"] = _zeros(c_lat, dtype)
    return p


def count_params(params: dict[str, ad.Tensor]) -> int:
    return int(sum(t.data.size for t in params.values()))


# --------------------------------------------------------------- forward


def residual_block(x: ad.Tensor, p: dict, prefix: str, groups: int) -> ad.Tensor:
    """GN -> SiLU -> conv3 -> GN -> SiLU -> conv3, plus identity or 1x1 skip."""
    h = ad.silu(ad.group_norm(x, groups, p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"]))
    h = ad.conv1d(h, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], padding=1)
    h = ad.silu(ad.group_norm(h, groups, p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"]))
    h = ad.conv1d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], padding=1)
    skip = x
    if f"{prefix}.skip.w" in p:
        skip = ad.conv1d(x, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"])
    return h + skip


def pad_latent(x, multiple: int = 32):
    """Right zero-pad the time axis to a multiple; returns (padded, original F)."""
    f = x.shape[-1]
    if f < 1:
        raise ValueError("latent needs at least one frame")
    extra = -f % multiple
    if isinstance(x, ad.Tensor):
        return ad.pad_time(x, extra), f
    widths = [(0, 0)] * (np.ndim(x) - 1) + [(0, extra)]
    return np.pad(x, widths), f


def crop_latent(x, f: int):
    if isinstance(x, ad.Tensor):
        return ad.crop_time(x, 0, f)
    return x[..., :f]


def _guard(name: str, fn, *args):
    try:
        return fn(*args)
    except FloatingPointError as exc:
        raise FloatingPointError(f"non-finite activation in {name}: {exc}") from None


def unet_forward(x, params: dict, config: UNetConfig, trace: dict | None = None) -> ad.Tensor:
    """Map a normalized (B, C_lat, F) latent to a clean-latent estimate of the same shape.

    ``trace``, when given, is filled with the encoder level widths and
    time lengths, and the bottleneck width/length.
    """
    x = ad._as_tensor(x)
    if x.ndim != 3 or x.shape[1] != config.in_channels:
        raise ad.ShapeError(f"U-Net expects (B, {config.in_channels}, F), got {x.shape}")
    p, g = params, config.norm_groups
    xp, f = pad_latent(x, config.multiple)
    h = _guard("stem", ad.conv1d, xp, p["stem.w"], p["stem.b"], 1, config.stem_kernel // 2)
    skips = []
    for lvl in range(config.levels):
        for r in range(config.res_blocks_per_level):
            h = _guard(f"enc{lvl}.res{r}", residual_block, h, p, f"enc{lvl}.res{r}", g)
        skips.append(h)
        h = _guard(f"enc{lvl}.down", ad.conv1d, h, p[f"enc{lvl}.down.w"], p[f"enc{lvl}.down.b"], 2, 1)
    for r in range(config.res_blocks_per_level):
        h = _guard(f"mid.res{r}", residual_block, h, p, f"mid.res{r}", g)
    if trace is not None:
        trace["enc_channels"] = [s.shape[1] for s in skips]
        trace["enc_lengths"] = [s.shape[2] for s in skips]
        trace["down_lengths"] = [s.shape[2] // 2 for s in skips]
        trace["bottleneck_channels"] = h.shape[1]
        trace["bottleneck_length"] = h.shape[2]
    for lvl in reversed(range(config.levels)):
        h = _guard(f"dec{lvl}.up", ad.conv_transpose1d, h, p[f"dec{lvl}.up.w"], p[f"dec{lvl}.up.b"], 2, 1)
        h = ad.concat_channels([h, skips[lvl]])
        for r in range(config.res_blocks_per_level):
            h = _guard(f"dec{lvl}.res{r}", residual_block, h, p, f"dec{lvl}.res{r}", g)
    out = _guard("out", ad.conv1d, h, p["out.w"], p["out.b"], 1, config.stem_kernel // 2)
    out = out + _guard("bypass", ad.conv1d, xp, p["bypass.w"], p["bypass.b"])
    return crop_latent(out, f)
