"""Finite-difference sweep over every differentiable op, the losses and a tiny U-Net.

Each case builds float64 inputs, reduces the op output to a scalar by a
fixed random projection (so every output element carries weight), and
compares analytic and central-difference gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .denoiser import UNetConfig, build_unet, unet_forward
from .losses import combined_loss, l1_waveform, mel_loss, si_sdr_db
from .spectral import MelConfig, StftConfig


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool


def _leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return ad.Tensor(x, requires_grad=True)


def _projected(out: ad.Tensor, rng) -> Callable[[], ad.Tensor]:
    weights = rng.standard_normal(out.shape)
    return lambda t: ad.sum(t * weights)


def _op_cases(rng) -> dict[str, tuple[Callable[[], ad.Tensor], list]]:
    cases = {}

    def unary(name, fn, shape=(3, 5), positive=False):
        x = _leaf(rng, *shape, positive=positive)
        proj = _projected(fn(x), rng)
        cases[name] = (lambda: proj(fn(x)), [x])

    def binary(name, fn, shape_a=(3, 5), shape_b=(3, 5), positive_b=False):
        a = _leaf(rng, *shape_a)
        b = _leaf(rng, *shape_b, positive=positive_b)
        proj = _projected(fn(a, b), rng)
        cases[name] = (lambda: proj(fn(a, b)), [a, b])

    binary("add", ad.add)
    binary("add_broadcast", ad.add, (2, 3, 4), (3, 1))
    binary("sub", ad.sub)
    binary("mul", ad.mul)
    binary("mul_broadcast", ad.mul, (2, 3, 4), (4,))
    binary("div", ad.div, positive_b=True)
    binary("dot", lambda a, b: ad.dot(a, b, axis=-1))
    unary("neg", ad.neg)
    unary("mul_scalar", lambda x: ad.mul_scalar(x, -2.5))
    unary("add_scalar", lambda x: ad.add_scalar(x, 1.5))
    unary("log10", ad.log10, positive=True)
    # clamp: keep every coordinate at least 0.05 away from the bounds
    xc = ad.Tensor(np.array([[-2.0, -0.7, 0.1, 0.6, 2.0]]), requires_grad=True)
    wc = rng.standard_normal(xc.shape)
    cases["clamp"] = (lambda: ad.sum(ad.clamp(xc, -1.0, 1.0) * wc), [xc])
    unary("silu", ad.silu)
    unary("sum_axis", lambda x: ad.sum(x, axis=1, keepdims=True))
    unary("sum_all", lambda x: ad.reshape(ad.sum(x), (1,)))
    unary("mean", lambda x: ad.mean(x, axis=0))
    unary("mean_abs", lambda x: ad.reshape(ad.mean_abs(x), (1,)))
    unary("sum_sq", lambda x: ad.sum_sq(x, axis=-1))
    unary("reshape", lambda x: ad.reshape(x, (5, 3)))
    unary("transpose", lambda x: ad.transpose(x, (0, 2, 1)), shape=(2, 3, 4))
    binary("concat_channels", lambda a, b: ad.concat_channels([a, b]), (2, 3, 6), (2, 2, 6))
    unary("pad_time", lambda x: ad.pad_time(x, 3), shape=(2, 3, 5))
    unary("crop_time", lambda x: ad.crop_time(x, 1, 4), shape=(2, 3, 6))

    for stride, pad in [(1, 0), (1, 1), (2, 1), (4, 2)]:
        x, w, b = _leaf(rng, 2, 3, 17), _leaf(rng, 4, 3, 4), _leaf(rng, 4)
        proj = _projected(ad.conv1d(x, w, b, stride, pad), rng)
        cases[f"conv1d_s{stride}_p{pad}"] = (
            lambda x=x, w=w, b=b, s=stride, p=pad, proj=proj: proj(ad.conv1d(x, w, b, s, p)), [x, w, b])
        x, w, b = _leaf(rng, 2, 3, 7), _leaf(rng, 3, 4, 4), _leaf(rng, 4)
        proj = _projected(ad.conv_transpose1d(x, w, b, stride, pad), rng)
        cases[f"conv_transpose1d_s{stride}_p{pad}"] = (
            lambda x=x, w=w, b=b, s=stride, p=pad, proj=proj: proj(ad.conv_transpose1d(x, w, b, s, p)), [x, w, b])

    x, g, bt = _leaf(rng, 2, 4, 6), _leaf(rng, 4), _leaf(rng, 4)
    proj = _projected(ad.group_norm(x, 2, g, bt), rng)
    cases["group_norm"] = (lambda: proj(ad.group_norm(x, 2, g, bt)), [x, g, bt])

    index = np.array([[0, 1, 2, 3], [2, 3, 4, 5], [4, 5, 6, 0]])
    unary("gather_frames", lambda x: ad.gather_frames(x, index), shape=(2, 7))
    unary("rfft_magnitude", ad.rfft_magnitude, shape=(2, 3, 8))
    matrix = rng.standard_normal((3, 5))
    unary("project", lambda x: ad.project(x, matrix), shape=(2, 5, 4))
    return cases


def _loss_cases(rng) -> dict:
    mel = MelConfig(StftConfig(64, 16), n_mels=8, sample_rate=8000)
    y = ad.Tensor(rng.standard_normal((2, 200)))
    y_hat = _leaf(rng, 2, 200)
    return {
        "l1_waveform": (lambda: l1_waveform(y_hat, y), [y_hat]),
        "mel_loss_l1": (lambda: mel_loss(y_hat, y, mel), [y_hat]),
        "mel_loss_l2": (lambda: mel_loss(y_hat, y, mel, norm="l2"), [y_hat]),
        "mel_loss_log": (lambda: mel_loss(y_hat, y, MelConfig(mel.stft, 8, sample_rate=8000, log=True)), [y_hat]),
        "si_sdr": (lambda: ad.sum(si_sdr_db(y_hat, y)), [y_hat]),
        "combined_loss": (lambda: combined_loss(y_hat, y, epoch=5, mel_cfg=mel)[0], [y_hat]),
    }


def _unet_case(rng):
    cfg = UNetConfig(in_channels=4, base_channels=4, levels=2, max_channels=16, res_blocks_per_level=2, norm_groups=2)
    params = build_unet(cfg, seed=1, dtype=np.float64)
    x = ad.Tensor(rng.standard_normal((2, 4, 16)))
    weights = rng.standard_normal((2, 4, 16))
    names = sorted(params)
    return (lambda: ad.sum(unet_forward(x, params, cfg) * weights)), [params[k] for k in names]


def run_suite(h: float = 1e-4, tol: float = 1e-4, unet_coords: int = 2000, seed: int = 0) -> list[CaseResult]:
    """Run every case in double precision; returns one result per case."""
    rng = np.random.default_rng(seed)
    cases = {**_op_cases(rng), **_loss_cases(rng)}
    cases["unet_tiny"] = _unet_case(rng)
    results = []
    for name, (f, params) in cases.items():
        limit = unet_coords if name == "unet_tiny" else None
        rep = ad.grad_check(f, params, h=h, tol=tol, max_coords=limit, rng=np.random.default_rng(seed))
        results.append(CaseResult(name, rep.max_rel_error, rep.n_checked, rep.passed(tol)))
    return results
