import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from augscore import autodiff as ad
from tests.conftest import check_grads


def t(x, track=False):
    return ad.tensor(np.asarray(x, dtype=np.float64), track=track)


# ---------------------------------------------------------------- elementwise

def test_add_forward_and_grads():
    a = t([1.0, 2.0], track=True)
    b = t([3.0, 4.0], track=True)
    out = ad.reduce_sum(a + b)
    assert out.data == pytest.approx(10.0)
    g = ad.backward(out)
    np.testing.assert_array_equal(g[a].data, [1.0, 1.0])
    np.testing.assert_array_equal(g[b].data, [1.0, 1.0])


def test_mul_by_zero_gradients():
    # d(a*b)/da at b=0 is 0; d/db is a
    a = t([2.0, -3.0], track=True)
    b = t([0.0, 0.0], track=True)
    g = ad.backward(ad.reduce_sum(a * b))
    np.testing.assert_array_equal(g[a].data, [0.0, 0.0])
    np.testing.assert_array_equal(g[b].data, [2.0, -3.0])


def test_scalar_broadcast_only():
    a = t(np.ones((2, 3)), track=True)
    s = t(2.0, track=True)
    out = ad.reduce_sum(a * s)
    assert out.data == pytest.approx(12.0)
    g = ad.backward(out)
    assert g[s].data == pytest.approx(6.0)
    with pytest.raises(ad.ShapeError):
        ad.add(t(np.ones((2, 3))), t(np.ones(3)))


def test_div_by_zero_raises():
    with pytest.raises(ad.DomainError):
        ad.div(t([1.0]), t([0.0]))


def test_relu_subgradient_zero_at_zero():
    x = t([-1.0, 0.0, 2.0], track=True)
    g = ad.backward(ad.reduce_sum(ad.relu(x)))
    np.testing.assert_array_equal(g[x].data, [0.0, 0.0, 1.0])


def test_leaky_relu_values_and_slopes():
    x = t([-2.0, 0.0, 3.0], track=True)
    y = ad.leaky_relu(x, alpha=0.25)
    np.testing.assert_allclose(y.data, [-0.5, 0.0, 3.0])
    g = ad.backward(ad.reduce_sum(y))
    np.testing.assert_array_equal(g[x].data, [0.25, 0.25, 1.0])
    with pytest.raises(ValueError):
        ad.leaky_relu(x, alpha=1.5)


def test_exp_at_zero():
    x = t([0.0], track=True)
    y = ad.exp(x)
    assert y.data[0] == pytest.approx(1.0)
    g = ad.backward(ad.reduce_sum(y))
    assert g[x].data[0] == pytest.approx(1.0)


def test_log_domain():
    with pytest.raises(ad.DomainError):
        ad.log(t([0.0]))
    with pytest.raises(ad.DomainError):
        ad.log(t([-1.0]))


def test_abs_sign_gradient():
    x = t([-2.0, 0.0, 3.0], track=True)
    g = ad.backward(ad.reduce_sum(ad.absolute(x)))
    np.testing.assert_array_equal(g[x].data, [-1.0, 0.0, 1.0])


# ---------------------------------------------------------------- reductions

def test_mean_gradient_uniform():
    x = t(np.arange(6, dtype=np.float64).reshape(2, 3), track=True)
    g = ad.backward(ad.reduce_mean(x))
    np.testing.assert_allclose(g[x].data, np.full((2, 3), 1 / 6))


def test_sum_axis_against_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    out = ad.reduce_sum(t(x), axes=(1,))
    expect = np.array([sum(x[i, j] for j in range(5)) for i in range(4)])
    np.testing.assert_allclose(out.data, expect)


def test_l2norm_sq_gradient():
    x = t([1.0, -2.0, 3.0], track=True)
    g = ad.backward(ad.l2_norm_sq(x))
    np.testing.assert_allclose(g[x].data, [2.0, -4.0, 6.0])


def test_l1norm_value():
    x = t([[1.0, -2.0], [-3.0, 4.0]])
    assert ad.l1_norm(x).data == pytest.approx(10.0)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 3))
    out = ad.matmul(t(a), t(np.eye(3)))
    np.testing.assert_allclose(out.data, a)


def test_matmul_hand_2x2():
    a = t([[1.0, 2.0], [3.0, 4.0]], track=True)
    b = t([[5.0, 6.0], [7.0, 8.0]], track=True)
    c = ad.matmul(a, b)
    np.testing.assert_allclose(c.data, [[19.0, 22.0], [43.0, 50.0]])
    g = ad.backward(ad.reduce_sum(c))
    # dC = ones: dA = ones @ B^T, dB = A^T @ ones
    np.testing.assert_allclose(g[a].data, np.ones((2, 2)) @ b.data.T)
    np.testing.assert_allclose(g[b].data, a.data.T @ np.ones((2, 2)))


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 5))
    out = ad.matmul(t(a), t(b)).data
    expect = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            for k in range(3):
                expect[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_matmul_batched_lhs():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(2, 4, 3))
    b = rng.normal(size=(3, 5))
    out = ad.matmul(t(a), t(b)).data
    np.testing.assert_allclose(out, a @ b, rtol=1e-12)


# ---------------------------------------------------------------- conv2d

def conv2d_loop(x, w, stride=1, padding=0):
    """Naive per-element cross-correlation oracle."""
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((b, f, oh, ow))
    for n in range(b):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[n, ci, i * stride + ki, j * stride + kj] * w[o, ci, ki, kj]
                    out[n, o, i, j] = acc
    return out


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 1, 4, 4))
    w = np.zeros((1, 1, 1, 1))
    w[0, 0, 0, 0] = 1.0
    out = ad.conv2d(t(x), t(w))
    np.testing.assert_allclose(out.data, x)


def test_conv2d_all_ones_kernel_sums_window():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    w = np.ones((1, 1, 2, 2))
    out = ad.conv2d(t(x), t(w), stride=2).data
    np.testing.assert_allclose(out[0, 0], [[0 + 1 + 4 + 5, 2 + 3 + 6 + 7],
                                           [8 + 9 + 12 + 13, 10 + 11 + 14 + 15]])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_against_loop_oracle(stride, padding):
    rng = np.random.default_rng(8 + stride * 10 + padding)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    got = ad.conv2d(t(x), t(w), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, conv2d_loop(x, w, stride, padding), rtol=1e-10, atol=1e-12)


def test_conv2d_kernel_too_large():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 5, 5))))


def test_upsample_nearest2x_roundtrip():
    x = t(np.arange(4, dtype=np.float64).reshape(1, 2, 2, 1), track=True)
    y = ad.upsample_nearest2x(x)
    assert y.shape == (1, 4, 4, 1)
    np.testing.assert_array_equal(y.data[0, :, :, 0], [[0, 0, 1, 1], [0, 0, 1, 1],
                                                       [2, 2, 3, 3], [2, 2, 3, 3]])
    g = ad.backward(ad.reduce_sum(y))
    np.testing.assert_array_equal(g[x].data, np.full((1, 2, 2, 1), 4.0))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 1)])
def test_conv2d_nhwc_matches_nchw(stride, padding):
    rng = np.random.default_rng(21)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    a = ad.conv2d(t(x), t(w), stride=stride, padding=padding).data
    b = ad.conv2d_nhwc(t(x.transpose(0, 2, 3, 1)), t(w.transpose(2, 3, 1, 0)),
                       stride=stride, padding=padding).data
    np.testing.assert_allclose(a, b.transpose(0, 3, 1, 2), rtol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_nhwc_input_gradient_fd(stride, padding):
    rng = np.random.default_rng(31 + stride + padding)
    x = rng.normal(size=(2, 6, 5, 3)) * 0.5
    w = rng.normal(size=(3, 3, 3, 2)) * 0.5

    def build(xt, wt):
        return ad.reduce_mean(ad.relu(ad.conv2d_nhwc(xt, wt, stride=stride, padding=padding)))

    check_grads(build, [x, w], rtol=3e-4)


# ---------------------------------------------------------------- structure

def test_concat_and_slice_grads():
    a = t([[1.0, 2.0]], track=True)
    b = t([[3.0, 4.0]], track=True)
    c = ad.concat([a, b], axis=0)
    top = ad.slice_rows(c, 0, 1)
    g = ad.backward(ad.reduce_sum(top))
    np.testing.assert_array_equal(g[a].data, [[1.0, 1.0]])
    np.testing.assert_array_equal(g[b].data, [[0.0, 0.0]])


def test_detach_blocks_gradient():
    x = t([2.0], track=True)
    y = ad.mul(x, x)
    z = ad.detach(y)
    out = ad.reduce_sum(ad.mul(z, x))  # only the direct x factor is live
    g = ad.backward(out)
    np.testing.assert_allclose(g[x].data, z.data)  # d/dx (const * x) = const
    assert not z.tracked


def test_detached_weight_times_loss():
    # weight = detach(f(x)); loss = weight * g(x): gradient treats weight as const
    x = t([1.5], track=True)
    w = ad.detach(ad.mul(x, x))            # 2.25, constant
    loss = ad.reduce_sum(ad.mul(w, ad.mul(x, x)))
    g = ad.backward(loss)
    np.testing.assert_allclose(g[x].data, [2.25 * 2 * 1.5])


def test_fanout_accumulation():
    # y = f(x) + g(x) accumulates both paths
    x = t([3.0], track=True)
    loss = ad.reduce_sum(ad.add(ad.mul(x, x), ad.exp(x)))
    g = ad.backward(loss)
    np.testing.assert_allclose(g[x].data, [2 * 3.0 + np.exp(3.0)])


def test_backward_requires_tracked_scalar():
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.tensor(np.zeros(3), track=True))
    with pytest.raises(ValueError):
        ad.backward(ad.tensor(1.0))


def test_forward_identical_tracked_untracked():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 4))
    w = rng.normal(size=(1, 1, 3, 3))
    a = ad.conv2d(ad.tensor(x.reshape(1, 1, 4, 4)), ad.tensor(w), padding=1).data
    b = ad.conv2d(ad.tensor(x.reshape(1, 1, 4, 4), track=True),
                  ad.tensor(w, track=True), padding=1).data
    np.testing.assert_array_equal(a, b)


def test_row_ops_grads():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 4))
    b = rng.normal(size=4)
    v = rng.normal(size=3)
    s = rng.normal(size=3) + 3.0  # away from zero
    check_grads(lambda xt, bt: ad.reduce_sum(ad.exp(ad.add_row_bias(xt, bt))), [x, b])
    check_grads(lambda xt, vt: ad.l2_norm_sq(ad.add_rowwise(xt, vt)), [x, v])
    check_grads(lambda xt, st: ad.reduce_sum(ad.exp(ad.mul_rows(xt, st))), [x, s])
    check_grads(lambda xt, st: ad.reduce_sum(ad.exp(ad.div_rows(xt, st))), [x, s])


def test_cholesky_and_inverse_grads():
    rng = np.random.default_rng(13)
    a = rng.normal(size=(4, 4))
    spd = a @ a.T + 4.0 * np.eye(4)

    def build_chol(st):
        return ad.reduce_sum(ad.mul(ad.cholesky(st), ad.cholesky(st)))

    # bump symmetrically for the FD oracle: restrict to symmetric perturbations
    def build_sym(st):
        sym = ad.mul(ad.add(st, ad.transpose(st)), ad.tensor(0.5))
        return ad.reduce_sum(ad.exp(ad.cholesky(sym)))

    check_grads(build_sym, [spd], rtol=5e-4)

    def build_inv(at):
        return ad.reduce_sum(ad.exp(ad.inverse(at)))

    check_grads(build_inv, [spd], rtol=5e-4)


def test_transpose_reshape_grads():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(3, 4))
    check_grads(lambda xt: ad.reduce_sum(ad.exp(ad.transpose(xt))), [x])
    check_grads(lambda xt: ad.l2_norm_sq(ad.reshape(xt, (2, 6))), [x])


# ------------------------------------------------- finite-difference sweep

def _away_from_kinks(x, margin=0.2):
    # keep relu/abs inputs off the kink so central differences are valid
    return x + np.sign(x) * margin + (x == 0) * margin


FD_CASES = {
    "add": lambda a, b: ad.reduce_sum(ad.exp(ad.add(a, b))),
    "sub": lambda a, b: ad.l2_norm_sq(ad.sub(a, b)),
    "mul": lambda a, b: ad.reduce_sum(ad.mul(a, b)),
    "div": lambda a, b: ad.reduce_sum(ad.div(a, b)),
    "relu": lambda a, b: ad.reduce_sum(ad.relu(ad.mul(a, b))),
    "leaky_relu": lambda a, b: ad.reduce_sum(ad.leaky_relu(ad.mul(a, b))),
    "exp_mean": lambda a, b: ad.reduce_mean(ad.exp(ad.mul(a, b))),
    "log": lambda a, b: ad.reduce_sum(ad.log(ad.add(ad.mul(a, a), ad.mul(b, b)))),
    "sqrt": lambda a, b: ad.reduce_sum(ad.sqrt(ad.add(ad.mul(a, a), ad.mul(b, b)))),
    "abs": lambda a, b: ad.l1_norm(ad.mul(a, b)),
    "sum_axis": lambda a, b: ad.l2_norm_sq(ad.reduce_sum(ad.mul(a, b), axes=(0,))),
    "matmul": lambda a, b: ad.reduce_sum(ad.exp(ad.matmul(a, ad.transpose(b)))),
}


@pytest.mark.parametrize("name", sorted(FD_CASES))
def test_fd_sweep_per_op(name):
    rng = np.random.default_rng(hash(name) % 2**31)
    a = _away_from_kinks(rng.normal(size=(3, 4)) * 0.5)
    b = _away_from_kinks(rng.normal(size=(3, 4)) * 0.5)
    if name == "div":
        b = np.abs(b) + 1.0
    check_grads(FD_CASES[name], [a, b])


def test_fd_conv_composite():
    rng = np.random.default_rng(77)
    x = rng.normal(size=(2, 2, 5, 5)) * 0.5
    w = rng.normal(size=(3, 2, 3, 3)) * 0.5

    def build(xt, wt):
        return ad.reduce_mean(ad.relu(ad.conv2d(xt, wt, stride=2, padding=1)))

    check_grads(build, [x, w], rtol=3e-4)


# ---------------------------------------------------------------- properties

@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_add_mul_linearity(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 3))
    lhs = ad.mul(ad.add(t(a), t(b)), t(2.0)).data
    np.testing.assert_allclose(lhs, 2 * (a + b), rtol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_gradient_accumulation_matches_manual(seed):
    rng = np.random.default_rng(seed)
    xv = rng.normal(size=4)
    x = t(xv, track=True)
    loss = ad.add(ad.l2_norm_sq(x), ad.reduce_sum(ad.mul(x, x)))
    g = ad.backward(loss)
    np.testing.assert_allclose(g[x].data, 4 * xv, rtol=1e-10)
