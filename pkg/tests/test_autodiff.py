import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codecdenoise import autodiff as ad
from codecdenoise.errors import ConfigError


def T(x, grad=True):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def _naive_conv1d(x, w, b, stride, padding):
    bsz, cin, t = x.shape
    cout, _, k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    t_out = (t + 2 * padding - k) // stride + 1
    y = np.zeros((bsz, cout, t_out))
    for n in range(bsz):
        for o in range(cout):
            for i in range(t_out):
                y[n, o, i] = b[o] + np.sum(w[o] * xp[n, :, i * stride : i * stride + k])
    return y


def _naive_group_norm(x, groups, gamma, beta, eps):
    bsz, c, t = x.shape
    out = np.empty_like(x)
    per = c // groups
    for n in range(bsz):
        for g in range(groups):
            block = x[n, g * per : (g + 1) * per]
            mu = block.sum() / block.size
            var = ((block - mu) ** 2).sum() / block.size
            out[n, g * per : (g + 1) * per] = (block - mu) / np.sqrt(var + eps)
    return out * gamma[None, :, None] + beta[None, :, None]


# ------------------------------------------------------------------ conv


def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 10))
    w = np.zeros((3, 3, 1))
    w[np.arange(3), np.arange(3), 0] = 1
    y = ad.conv1d(T(x), T(w), T(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x)


def test_conv1d_hand_example():
    y = ad.conv1d(T([[[1.0, 2.0, 3.0]]]), T([[[1.0, 1.0]]]), T([0.0]))
    assert y.data.reshape(-1).tolist() == [3.0, 5.0]


def test_conv_lengths():
    x = T(np.zeros((1, 2, 16)))
    w = T(np.zeros((2, 2, 4)))
    down = ad.conv1d(x, w, None, stride=2, padding=1)
    assert down.shape == (1, 2, 8)
    up = ad.conv_transpose1d(down, w, None, stride=2, padding=1)
    assert up.shape == (1, 2, 16)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    stride=st.integers(1, 4),
    k=st.integers(1, 5),
    padding=st.integers(0, 2),
    t=st.integers(5, 20),
)
def test_conv1d_matches_naive_loop(seed, stride, k, padding, t):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((2, 3, t)), rng.standard_normal((4, 3, k)), rng.standard_normal(4)
    y = ad.conv1d(T(x), T(w), T(b), stride=stride, padding=padding)
    np.testing.assert_allclose(y.data, _naive_conv1d(x, w, b, stride, padding), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    stride=st.integers(1, 4),
    k=st.integers(1, 6),
    padding=st.integers(0, 2),
    t_out=st.integers(2, 12),
)
def test_conv_transpose_is_adjoint(seed, stride, k, padding, t_out):
    # pick the input length whose down/up lengths match exactly
    t = (t_out - 1) * stride - 2 * padding + k
    if t < 1 or t + 2 * padding < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, t))
    w = rng.standard_normal((5, 3, k))
    cx = ad.conv1d(T(x), T(w), None, stride=stride, padding=padding).data
    assert cx.shape[-1] == t_out
    y = rng.standard_normal(cx.shape)
    ty = ad.conv_transpose1d(T(y), T(w), None, stride=stride, padding=padding).data
    assert ty.shape == x.shape
    lhs, rhs = np.sum(cx * y), np.sum(x * ty)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_conv_transpose_identity_kernel():
    x = np.random.default_rng(1).standard_normal((1, 2, 7))
    w = np.zeros((2, 2, 1))
    w[0, 0, 0] = w[1, 1, 0] = 1
    np.testing.assert_array_equal(ad.conv_transpose1d(T(x), T(w)).data, x)


def test_conv_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.conv1d(T(np.zeros((1, 2, 8))), T(np.zeros((1, 3, 2))))
    with pytest.raises(ad.ShapeError):
        ad.conv1d(T(np.zeros((1, 1, 2))), T(np.zeros((1, 1, 4))))


# ------------------------------------------------------------ group norm


def test_group_norm_constant_is_zero():
    y = ad.group_norm(T(np.full((1, 4, 6), 3.0)), 2, T(np.ones(4)), T(np.zeros(4)))
    np.testing.assert_array_equal(y.data, 0.0)


def test_group_norm_stats_and_reference():
    rng = np.random.default_rng(2)
    x = 3 * rng.standard_normal((2, 8, 50)) + 1
    y = ad.group_norm(T(x), 4, T(np.ones(8)), T(np.zeros(8)), eps=1e-8).data
    grouped = y.reshape(2, 4, -1)
    assert np.all(np.abs(grouped.mean(-1)) < 1e-6)
    assert np.all(np.abs(grouped.var(-1) - 1) < 1e-4)
    gamma, beta = rng.standard_normal(8), rng.standard_normal(8)
    got = ad.group_norm(T(x), 4, T(gamma), T(beta), eps=1e-5).data
    np.testing.assert_allclose(got, _naive_group_norm(x, 4, gamma, beta, 1e-5), atol=1e-10)


def test_group_norm_divisibility():
    with pytest.raises(ConfigError):
        ad.group_norm(T(np.zeros((1, 6, 4))), 4, T(np.ones(6)), T(np.zeros(6)))


# ------------------------------------------------------------------ silu


def test_silu_values_and_derivative():
    x = T([0.0, 20.0])
    y = ad.silu(x)
    assert y.data[0] == 0.0
    assert abs(y.data[1] - 20.0) < 1e-7
    ad.backward(ad.sum(y))
    assert x.grad[0] == 0.5


def test_silu_finite_difference():
    x = T(np.random.default_rng(3).standard_normal(20) * 3)
    rep = ad.grad_check(lambda: ad.sum(ad.silu(x)), [x], h=1e-5)
    assert rep.max_rel_error < 1e-6


# ------------------------------------------------------------ reductions


def test_concat_pad_crop():
    a, b = T(np.ones((2, 64, 5))), T(np.zeros((2, 64, 5)))
    assert ad.concat_channels([a, b]).shape == (2, 128, 5)
    with pytest.raises(ad.ShapeError):
        ad.concat_channels([a, T(np.ones((2, 1, 4)))])
    x = T(np.arange(6.0).reshape(1, 1, 6))
    p = ad.pad_time(x, 3)
    assert p.data.reshape(-1).tolist() == [0, 1, 2, 3, 4, 5, 0, 0, 0]
    c = ad.crop_time(p, 1, 4)
    ad.backward(ad.sum(c))
    assert x.grad.reshape(-1).tolist() == [0, 1, 1, 1, 0, 0]
    with pytest.raises(ad.ShapeError):
        ad.crop_time(x, 2, 9)


def test_mean_abs_subgradient():
    x = T([-2.0, 0.0, 3.0, -1.0])
    ad.backward(ad.mean_abs(x))
    assert x.grad.tolist() == [-0.25, 0.0, 0.25, -0.25]


def test_dot_and_sum_sq_finite_difference():
    rng = np.random.default_rng(4)
    a, b = T(rng.standard_normal((3, 7))), T(rng.standard_normal((3, 7)))
    w = rng.standard_normal(3)
    rep = ad.grad_check(lambda: ad.sum(ad.mul(ad.dot(a, b), T(w, False))), [a, b], h=1e-5)
    assert rep.max_rel_error < 1e-6
    rep = ad.grad_check(lambda: ad.sum_sq(a), [a], h=1e-5)
    assert rep.max_rel_error < 1e-6


def test_log10_gradient():
    x = T([0.5, 2.0, 40.0])
    rep = ad.grad_check(lambda: ad.sum(ad.log10(x)), [x], h=1e-6)
    assert rep.max_rel_error < 1e-6


# -------------------------------------------------------------- backward


def test_backward_examples():
    x = T([1.0, 2.0])
    ad.backward(ad.sum_sq(x))
    assert x.grad.tolist() == [2.0, 4.0]
    x = T(np.ones(3))
    ad.backward(ad.sum(x + x))
    assert x.grad.tolist() == [2.0, 2.0, 2.0]


def test_backward_twice_is_an_error():
    x = T([1.0, 2.0])
    loss = ad.sum_sq(x)
    ad.backward(loss)
    with pytest.raises(RuntimeError):
        ad.backward(loss)


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        ad.backward(T([1.0, 2.0]) * 2.0)


def test_non_finite_detection():
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        ad.div(T([1.0]), T([0.0]))


def test_no_grad_records_nothing():
    x = T([1.0, 2.0])
    with ad.no_grad():
        y = ad.sum_sq(x)
    assert not y.requires_grad
    assert ad.grad_enabled()


# ------------------------------------------------------------ grad_check


def test_grad_check_square():
    x = T([3.0])
    rep = ad.grad_check(lambda: ad.sum_sq(x), [x], h=1e-5)
    assert rep.max_rel_error < 1e-9
    assert x.data[0] == 3.0


def test_grad_check_catches_bad_backward(monkeypatch):
    real = ad.sum_sq

    def halved(x, axis=None):
        y = real(x, axis)
        # rebuild with a backward that is off by a factor of two
        return ad._result(y.data, (x,), lambda g: (g * x.data,), "bad_sum_sq")

    x = T(np.random.default_rng(5).standard_normal(6))
    rep = ad.grad_check(lambda: halved(x), [x], h=1e-5)
    assert abs(rep.max_rel_error - 0.5) < 1e-6


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), stride=st.sampled_from([1, 2, 4]), k=st.sampled_from([1, 3, 4]))
def test_conv_grad_check_random_shapes(seed, stride, k):
    rng = np.random.default_rng(seed)
    x, w, b = T(rng.standard_normal((2, 2, 9))), T(rng.standard_normal((3, 2, k))), T(rng.standard_normal(3))
    pad = k // 2
    y0 = rng.standard_normal(ad.conv1d(x, w, b, stride, pad).shape)
    rep = ad.grad_check(lambda: ad.sum(ad.conv1d(x, w, b, stride, pad) * T(y0, False)), [x, w, b], h=1e-5)
    assert rep.max_rel_error < 1e-5
    z0 = rng.standard_normal(ad.conv_transpose1d(x, T(rng.standard_normal((2, 3, k))), None, stride, 0).shape)
    wt = T(rng.standard_normal((2, 3, k)))
    rep = ad.grad_check(lambda: ad.sum(ad.conv_transpose1d(x, wt, None, stride, 0) * T(z0, False)), [x, wt], h=1e-5)
    assert rep.max_rel_error < 1e-5


def test_group_norm_grad_check():
    rng = np.random.default_rng(6)
    x, g, b = T(rng.standard_normal((2, 4, 5))), T(rng.standard_normal(4)), T(rng.standard_normal(4))
    y0 = rng.standard_normal((2, 4, 5))
    rep = ad.grad_check(lambda: ad.sum(ad.group_norm(x, 2, g, b) * T(y0, False)), [x, g, b], h=1e-5)
    assert rep.max_rel_error < 1e-5
