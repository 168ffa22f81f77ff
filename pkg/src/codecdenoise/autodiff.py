"""Small reverse-mode autodiff over dense numpy arrays.

Every op returns a new :class:`Tensor` and, when any input requires a
gradient, records a closure that maps the output gradient to input
gradients.  :func:`backward` walks the recorded graph once in reverse
topological order.

The op set is exactly what the latent U-Net, the losses and the toy codec
need: 1-D (transposed) convolution, group norm, SiLU, a handful of
elementwise/reduction ops, and the STFT-magnitude pieces used by the mel
loss.  Data stays in whatever float dtype it arrives in, so gradient
checks run in float64 and training in float32.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "backward",
    "grad_check",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "mul_scalar",
    "add_scalar",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "mean_abs",
    "sum_sq",
    "dot",
    "log10",
    "log10_scalar",
    "clamp",
    "silu",
    "concat_channels",
    "pad_time",
    "crop_time",
    "conv1d",
    "conv_transpose1d",
    "group_norm",
    "gather_frames",
    "rfft_magnitude",
    "project",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


_state = threading.local()

# post-op finiteness check; cheap next to the convolutions
check_finite = True


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (validation, inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- graph


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients from fan-out are summed.  The graph is released afterwards;
    calling ``backward`` on the same loss again raises ``RuntimeError``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; rebuild the forward pass")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    if not loss.requires_grad:
        loss._consumed = True
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "mul_scalar")


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _result(x.data + c, (x,), lambda g: (g,), "add_scalar")


def log10(x: Tensor) -> Tensor:
    xd = x.data
    k = xd.dtype.type(1.0 / np.log(10.0))
    return _result(np.log10(xd), (x,), lambda g: (g * k / xd,), "log10")


log10_scalar = log10


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero wherever the clip is active."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _result(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _result(xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),), "silu")


# ----------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul_scalar(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_abs(x: Tensor) -> Tensor:
    """Mean of |x| over all entries; subgradient sign(x)/N with sign(0) = 0."""
    xd = x.data
    n = xd.size
    return _result(np.asarray(np.abs(xd).mean()), (x,), lambda g: (np.sign(xd) * (g / n),), "mean_abs")


def sum_sq(x: Tensor, axis=None) -> Tensor:
    xd = x.data

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (2 * xd * g,)

    return _result(np.asarray((xd * xd).sum(axis=axis)), (x,), bw, "sum_sq")


def dot(a: Tensor, b: Tensor, axis=-1) -> Tensor:
    """Inner product along ``axis`` (all axes when ``axis`` is None)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return _result(np.asarray((ad * bd).sum(axis=axis)), (a, b), bw, "dot")


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate (B, C_i, T) tensors along the channel axis."""
    xs = [_as_tensor(x) for x in xs]
    b, t = xs[0].shape[0], xs[0].shape[2]
    for x in xs:
        if x.ndim != 3 or x.shape[0] != b or x.shape[2] != t:
            raise ShapeError(f"concat_channels needs equal (B, T): {[x.shape for x in xs]}")
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    return _result(
        np.concatenate([x.data for x in xs], axis=1),
        xs,
        lambda g: tuple(np.split(g, splits, axis=1)),
        "concat_channels",
    )


def pad_time(x: Tensor, n: int) -> Tensor:
    """Append ``n`` zeros on the right of the last axis."""
    if n == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 1) + [(0, n)]
    t = x.shape[-1]
    return _result(np.pad(x.data, widths), (x,), lambda g: (g[..., :t].copy(),), "pad_time")


def crop_time(x: Tensor, start: int, stop: int) -> Tensor:
    """Keep ``x[..., start:stop]``; gradient is zero outside the kept region."""
    t = x.shape[-1]
    if not 0 <= start <= stop <= t:
        raise ShapeError(f"crop_time [{start}:{stop}] out of range for length {t}")

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _result(x.data[..., start:stop].copy(), (x,), bw, "crop_time")


# --------------------------------------------------------- convolutions


def _im2col(xp: np.ndarray, k: int, stride: int, t_out: int) -> np.ndarray:
    """(B, C, Tp) -> (C*K, B*T_out) column matrix."""
    b, c, _ = xp.shape
    win = sliding_window_view(xp, k, axis=2)[:, :, : (t_out - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(1, 3, 0, 2))
    return cols.reshape(c * k, b * t_out)


def _col2im(cols: np.ndarray, b: int, c: int, k: int, stride: int, t_out: int, t_full: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back to (B, C, T_full)."""
    cols = cols.reshape(c, k, b, t_out)
    out = np.zeros((b, c, t_full), dtype=cols.dtype)
    span = (t_out - 1) * stride + 1
    for j in range(k):
        out[:, :, j : j + span : stride] += cols[:, j].transpose(1, 0, 2)
    return out


def _fold_bt(y: np.ndarray) -> np.ndarray:
    """(B, C, T) -> (C, B*T)."""
    b, c, t = y.shape
    return np.ascontiguousarray(y.transpose(1, 0, 2)).reshape(c, b * t)


def _unfold_bt(y2: np.ndarray, b: int, t: int) -> np.ndarray:
    c = y2.shape[0]
    return np.ascontiguousarray(y2.reshape(c, b, t).transpose(1, 0, 2))


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, Cin, T) with (Cout, Cin, K) weights, zero padded."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} vs weight {w.shape}")
    bsz, cin, t = x.shape
    cout, _, k = w.shape
    tp = t + 2 * padding
    if tp < k:
        raise ShapeError(f"conv1d: padded length {tp} shorter than kernel {k}")
    t_out = (tp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, t_out)
    w2 = w.data.reshape(cout, cin * k)
    out = _unfold_bt(w2 @ cols, bsz, t_out)
    if b is not None:
        out += b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = _fold_bt(g)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _col2im(w2.T @ g2, bsz, cin, k, stride, t_out, tp)
            gx = gxp[:, :, padding : padding + t] if padding else gxp
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(out, parents, bw, "conv1d")


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv1d`; weights are (Cin, Cout, K).

    Output length is (T - 1) * stride - 2 * padding + K, so stride 2, K 4,
    padding 1 exactly undoes the matching strided conv1d.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose1d: input {x.shape} vs weight {w.shape}")
    bsz, cin, t = x.shape
    _, cout, k = w.shape
    t_full = (t - 1) * stride + k
    t_out = t_full - 2 * padding
    if t_out < 1:
        raise ShapeError(f"conv_transpose1d: output length {t_out} < 1")
    w2 = w.data.reshape(cin, cout * k)
    x2 = _fold_bt(x.data)
    full = _col2im(w2.T @ x2, bsz, cout, k, stride, t, t_full)
    out = full[:, :, padding : padding + t_out] if padding else full
    if b is not None:
        out = out + b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding))) if padding else g
        cols = _im2col(gp, k, stride, t)
        gx = _unfold_bt(w2 @ cols, bsz, t) if x.requires_grad else None
        gw = (x2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2)) if b.requires_grad else None)

    return _result(np.ascontiguousarray(out), parents, bw, "conv_transpose1d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (batch, channel-group) slab, then a per-channel affine."""
    if x.ndim != 3:
        raise ShapeError(f"group_norm expects (B, C, T), got {x.shape}")
    bsz, c, t = x.shape
    if c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(bsz, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + xg.dtype.type(eps))
    xhat = (xc * inv).reshape(bsz, c, t)
    out = xhat * gamma.data[:, None] + beta.data[:, None]
    n = xg.shape[2]

    def bw(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=(0, 2))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2))
        if x.requires_grad:
            dxhat = (g * gamma.data[:, None]).reshape(bsz, groups, n)
            xh = xhat.reshape(bsz, groups, n)
            s1 = dxhat.sum(axis=2, keepdims=True)
            s2 = (dxhat * xh).sum(axis=2, keepdims=True)
            gx = (inv / n * (n * dxhat - s1 - xh * s2)).reshape(bsz, c, t)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bw, "group_norm")


# ------------------------------------------------------------- spectral


def gather_frames(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[..., index]`` for an integer index array; backward scatter-adds.

    Used to build (reflect-padded) STFT frames directly from the signal.
    """
    xd = x.data
    t = xd.shape[-1]
    lead = xd.shape[:-1]
    flat_idx = index.ravel()

    def bw(g):
        rows = int(np.prod(lead)) if lead else 1
        g2 = g.reshape(rows, -1)
        out = np.empty((rows, t), dtype=g.dtype)
        for r in range(rows):
            out[r] = np.bincount(flat_idx, weights=g2[r], minlength=t)
        return (out.reshape(xd.shape),)

    return _result(xd[..., index], (x,), bw, "gather_frames")


def rfft_magnitude(frames: Tensor) -> Tensor:
    """|rfft(frames)| along the last axis; zero subgradient at zero magnitude."""
    fd = frames.data
    n = fd.shape[-1]
    spec = np.fft.rfft(fd, axis=-1)
    mag = np.abs(spec).astype(fd.dtype, copy=False)

    def bw(g):
        safe = np.where(mag > 0, mag, 1)
        z = np.where(mag > 0, g / safe, 0) * spec
        z[..., 1 : (n + 1) // 2] *= 0.5
        # real-input DFT adjoint: sum_k Re(Z_k e^{+i 2 pi k t / n}) = n * irfft(Z')
        return ((np.fft.irfft(z, n=n, axis=-1) * n).astype(fd.dtype, copy=False),)

    return _result(mag, (frames,), bw, "rfft_magnitude")


def project(x: Tensor, matrix: np.ndarray) -> Tensor:
    """Apply a constant (M, K) matrix along axis -2 of a (..., K, F) tensor."""
    m = np.asarray(matrix, dtype=x.dtype)
    if x.shape[-2] != m.shape[1]:
        raise ShapeError(f"project: matrix {m.shape} vs input {x.shape}")
    return _result(np.matmul(m, x.data), (x,), lambda g: (np.matmul(m.T, g),), "project")


# ---------------------------------------------------------- grad checks


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[int, int] | None  # (param number, flat index)
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` rebuilds the graph from ``params`` on each call.  Relative error is
    |a - n| / max(|a|, |n|, 1e-12).  ``max_coords`` samples that many
    coordinates (uniformly, without replacement) when the parameters are
    large; ``tol`` is only recorded for :meth:`GradCheckReport.passed`.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst, worst_at = 0.0, None
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f().data)
            flat[j] = orig - h
            fm = float(f().data)
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic[i].reshape(-1)[j])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            if err > worst:
                worst, worst_at = err, (i, j)
    return GradCheckReport(worst, worst_at, len(coords))
