import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panmamba.errors import ConfigError, DimensionError, NumericError, UsageError
from panmamba.gradcheck import check_gradients
from panmamba.ops import conv1d_depthwise, conv2d, dwconv2d, layer_norm, linear, sigmoid, silu, softplus
from panmamba.tensor import (Graph, Tensor, backward, concat, exp, expm1, no_grad, precision, tabs,
                             tsum)
from panmamba.train import l1_loss

SEEDS = range(10)


def T(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def fd_ok(fn, params, tol=1e-5):
    res = check_gradients(fn, params, eps=1e-5)
    worst = max(r.max_rel_err for r in res)
    assert worst < tol, [(r.name, r.max_rel_err) for r in res]


def weighted(out, rng):
    return (out * Tensor(rng.normal(size=out.shape))).sum()


# -- construction ---------------------------------------------------------------
def test_rejects_nonfinite():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        Tensor([np.inf])


def test_rejects_empty():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_grad_shape_matches_data(f64):
    x = T(np.ones((2, 3)))
    backward((x * 2.0).sum())
    assert x.grad.shape == x.shape


def test_item_requires_scalar():
    with pytest.raises(UsageError):
        Tensor([1.0, 2.0]).item()


def test_graph_replay_is_reverse_creation_order(f64):
    a = T([1.0, 2.0])
    b = a * 3.0
    c = exp(b)
    d = c.sum()
    g = Graph.trace(d)
    seqs = [n._seq for n in g.nodes]
    assert seqs == sorted(seqs)
    assert g.nodes[-1] is d and a in g.leaves()


# -- linear ---------------------------------------------------------------------
def test_linear_identity(f64):
    np.testing.assert_array_equal(linear(T([[[1.0, 2.0]]]), T(np.eye(2))).data, [[[1.0, 2.0]]])


def test_linear_sum_plus_bias(f64):
    y = linear(T([[[1.0, 1.0]]]), T([[1.0], [1.0]]), T([0.5]))
    np.testing.assert_array_equal(y.data, [[[2.5]]])


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        linear(T(np.ones((1, 3, 4))), T(np.ones((3, 2))))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_fd(f64, seed):
    rng = np.random.default_rng(seed)
    x, W, b = T(rng.normal(size=(1, 3, 4))), T(rng.normal(size=(4, 2))), T(rng.normal(size=2))
    w = Tensor(rng.normal(size=(1, 3, 2)))
    fd_ok(lambda: (linear(x, W, b) * w).sum(), [x, W, b])


# -- conv1d ---------------------------------------------------------------------
def test_conv1d_identity_tap(f64, rng):
    x = T(rng.normal(size=(2, 3, 7)))
    w = T(np.tile([0.0, 0.0, 0.0, 1.0], (3, 1)))
    np.testing.assert_array_equal(conv1d_depthwise(x, w, T(np.zeros(3))).data, x.data)


def test_conv1d_constant_plus_bias(f64):
    x = T(np.full((1, 2, 5), 3.0))
    w = T(np.tile([0.0, 0.0, 0.0, 1.0], (2, 1)))
    np.testing.assert_array_equal(conv1d_depthwise(x, w, T(np.ones(2))).data, 4.0)


def test_conv1d_vs_naive(f64, rng):
    B, P, N, k = 2, 3, 9, 4
    x, w, b = rng.normal(size=(B, P, N)), rng.normal(size=(P, k)), rng.normal(size=P)
    ref = np.zeros((B, P, N))
    for bb in range(B):
        for p in range(P):
            for t in range(N):
                acc = b[p]
                for j in range(k):
                    s = t - k + 1 + j
                    if s >= 0:
                        acc += w[p, j] * x[bb, p, s]
                ref[bb, p, t] = acc
    out = conv1d_depthwise(T(x), T(w), T(b)).data
    assert np.abs(out - ref).max() < 1e-12


def test_conv1d_channel_mismatch():
    with pytest.raises(DimensionError):
        conv1d_depthwise(T(np.ones((1, 3, 5))), T(np.ones((2, 4))), T(np.ones(2)))


@given(t=st.integers(0, 11), seed=st.integers(0, 2**16))
def test_conv1d_causal(t, seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        x = rng.normal(size=(1, 3, 12))
        w, b = T(rng.normal(size=(3, 4))), T(rng.normal(size=3))
        y0 = conv1d_depthwise(T(x), w, b).data
        x2 = x.copy()
        x2[:, :, t] += 1.0
        y1 = conv1d_depthwise(T(x2), w, b).data
    np.testing.assert_array_equal(y0[:, :, :t], y1[:, :, :t])


@pytest.mark.parametrize("seed", SEEDS)
def test_conv1d_fd(f64, seed):
    rng = np.random.default_rng(seed)
    x, w, b = T(rng.normal(size=(1, 3, 6))), T(rng.normal(size=(3, 4))), T(rng.normal(size=3))
    probe = Tensor(rng.normal(size=(1, 3, 6)))
    fd_ok(lambda: (conv1d_depthwise(x, w, b) * probe).sum(), [x, w, b])


# -- conv2d ---------------------------------------------------------------------
def test_conv2d_dirac(f64, rng):
    x = T(rng.normal(size=(1, 2, 5, 5)))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d(x, T(w), T(np.zeros(2))).data, x.data)


def test_conv2d_constant_interior(f64):
    x = T(np.full((1, 1, 5, 5), 2.0))
    w = np.full((1, 1, 3, 3), 0.5)  # sums to 4.5
    y = conv2d(x, T(w), T(np.zeros(1))).data
    np.testing.assert_allclose(y[0, 0, 1:-1, 1:-1], 9.0, rtol=0, atol=1e-14)


def test_conv2d_vs_naive(f64, rng):
    x, w, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref[0, o, i, j] = b[o] + sum(w[o, c, u, v] * xp[0, c, i + u, j + v]
                                             for c in range(2) for u in range(3) for v in range(3))
    assert np.abs(conv2d(T(x), T(w), T(b)).data - ref).max() < 1e-12


def test_conv2d_even_kernel():
    with pytest.raises(ConfigError):
        conv2d(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 2, 2))), T(np.zeros(1)))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_fd(f64, seed):
    rng = np.random.default_rng(seed)
    x, w, b = T(rng.normal(size=(1, 2, 4, 4))), T(rng.normal(size=(2, 2, 3, 3))), T(rng.normal(size=2))
    probe = Tensor(rng.normal(size=(1, 2, 4, 4)))
    fd_ok(lambda: (conv2d(x, w, b) * probe).sum(), [x, w, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_dwconv2d_fd(f64, seed):
    rng = np.random.default_rng(seed)
    x, w, b = T(rng.normal(size=(1, 3, 4, 4))), T(rng.normal(size=(3, 3, 3))), T(rng.normal(size=3))
    probe = Tensor(rng.normal(size=(1, 3, 4, 4)))
    fd_ok(lambda: (dwconv2d(x, w, b) * probe).sum(), [x, w, b])


# -- layer norm -----------------------------------------------------------------
def test_layer_norm_constant_token(f64):
    beta = T([0.1, 0.2, 0.3])
    y = layer_norm(T(np.full((1, 2, 3), 5.0)), T(np.ones(3)), beta)
    np.testing.assert_array_equal(y.data, np.broadcast_to(beta.data, (1, 2, 3)))


def test_layer_norm_already_normalized(f64):
    y = layer_norm(T([[[-1.0, 1.0]]]), T(np.ones(2)), T(np.zeros(2)), eps=1e-5)
    np.testing.assert_allclose(y.data, [[[-1.0, 1.0]]], atol=1e-5)


@given(seed=st.integers(0, 2**16), C=st.integers(2, 16))
def test_layer_norm_stats(seed, C):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        x = T(rng.normal(0, 3, size=(2, 5, C)) + rng.normal(size=(2, 5, 1)))
        y = layer_norm(x, T(np.ones(C)), T(np.zeros(C))).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    var = x.data.var(-1)
    np.testing.assert_allclose(y.var(-1), var / (var + 1e-5), rtol=1e-10)


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_fd(f64, seed):
    rng = np.random.default_rng(seed)
    x, g, b = T(rng.normal(size=(1, 2, 4))), T(rng.normal(size=4)), T(rng.normal(size=4))
    probe = Tensor(rng.normal(size=(1, 2, 4)))
    fd_ok(lambda: (layer_norm(x, g, b) * probe).sum(), [x, g, b], tol=1e-5)


# -- activations ------------------------------------------------------------------
def test_activation_values(f64):
    assert silu(T([0.0])).data[0] == 0.0
    assert abs(softplus(T([0.0])).data[0] - np.log(2.0)) < 1e-15
    assert abs(softplus(T([50.0])).data[0] - 50.0) < 1e-12
    assert np.isfinite(softplus(T([1000.0])).data).all()


@pytest.mark.parametrize("op", [silu, softplus, sigmoid, exp, expm1])
@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_fd(f64, op, seed):
    rng = np.random.default_rng(seed)
    x = T(rng.normal(size=(3, 4)))
    probe = Tensor(rng.normal(size=(3, 4)))
    fd_ok(lambda: (op(x) * probe).sum(), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_structural_ops_fd(f64, seed):
    rng = np.random.default_rng(seed)
    a, b = T(rng.normal(size=(2, 3))), T(rng.normal(size=(2, 3)) + 3.0)
    c = T(rng.normal(size=(3,)))
    probe = Tensor(rng.normal(size=(3, 4)))

    def fn():
        y = (a * b - c) / b + a
        z = concat([y.transpose(1, 0), y[:1].transpose(1, 0), c.reshape(3, 1)], axis=1)
        return (z * probe).sum() + tsum(y * y, axis=0).mean()

    fd_ok(fn, [a, b, c])


# -- backward -------------------------------------------------------------------
def test_backward_l1_sign(f64, rng):
    gt = rng.uniform(size=(2, 3))
    pred = T(gt + 0.25)
    backward(l1_loss(pred, gt))
    np.testing.assert_array_equal(pred.grad, np.full((2, 3), 1.0 / 6))


def test_backward_independent_param(f64):
    x, theta = T([1.0, 2.0]), T([3.0])
    loss = (x * x).sum()
    backward(loss)
    assert theta.grad is None or not np.any(theta.grad)


def test_backward_nonscalar():
    with pytest.raises(UsageError):
        backward(T([1.0, 2.0]) * 2.0)


def test_backward_accumulates_fanout(f64):
    x = T([2.0])
    backward((x * x + x).sum())
    np.testing.assert_array_equal(x.grad, [5.0])


def test_abs_tie_subgradient_zero(f64):
    x = T([0.0, -1.0, 2.0])
    backward(tabs(x).sum())
    np.testing.assert_array_equal(x.grad, [0.0, -1.0, 1.0])


def test_no_grad_records_nothing(f64):
    x = T([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_forward_bit_identical(rng):
    x, W = rng.normal(size=(2, 5, 8)), rng.normal(size=(8, 3))
    a = layer_norm(linear(Tensor(x), Tensor(W)), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    b = layer_norm(linear(Tensor(x), Tensor(W)), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert a.tobytes() == b.tobytes()


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        concat([T(np.ones((2, 3))), T(np.ones((3, 3)))], axis=1)
