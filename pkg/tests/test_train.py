import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panmamba.data import ImageTriple, synthetic_triple
from panmamba.errors import ConfigError, DimensionError, UsageError
from panmamba.model import NetworkConfig, build_model
from panmamba.tensor import Tensor, backward
from panmamba.train import (OptimizerState, TrainConfig, adam_step, check_compatible, clip_global_norm,
                            cosine_lr, global_norm, l1_loss, train)

TINY = NetworkConfig(channels=4, state=2, depth_extract=1, depth_swap=1, depth_cross=1)


def tiny_data(n=2, size=16):
    return [synthetic_triple(size, seed=s) for s in range(n)]


# -- schedule ------------------------------------------------------------------------
def test_cosine_endpoints_exact():
    cfg = TrainConfig(epochs=500)
    assert cosine_lr(0, cfg) == 5e-4
    assert cosine_lr(500, cfg) == 5e-8
    assert cosine_lr(250, cfg) == pytest.approx((5e-4 + 5e-8) / 2, rel=1e-12)


def test_train_schedule_reaches_final_lr():
    cfg = TrainConfig(epochs=3, batch_size=2)
    _, log = train(build_model(TINY), tiny_data(), cfg)
    assert log.step_lr[0] == 5e-4 and log.step_lr[-1] == 5e-8
    assert [r["lr"] for r in log.epochs][1] == pytest.approx((5e-4 + 5e-8) / 2, rel=1e-12)


@given(e=st.floats(0, 100))
def test_cosine_monotone_and_bounded(e):
    cfg = TrainConfig(epochs=100)
    lr = cosine_lr(e, cfg)
    assert 5e-8 <= lr <= 5e-4
    assert cosine_lr(min(e + 1, 100), cfg) <= lr


def test_cosine_out_of_range():
    with pytest.raises(UsageError):
        cosine_lr(-1, TrainConfig())


# -- clipping ------------------------------------------------------------------------
def test_clip_halves_norm_8():
    g = [np.array([4.0, 0.0]), np.array([[0.0], [4 * math.sqrt(3)]])]
    out, norm = clip_global_norm(g, 4.0)
    assert norm == pytest.approx(8.0, rel=1e-15)
    np.testing.assert_allclose(out[0], g[0] / 2, rtol=1e-15)
    np.testing.assert_allclose(out[1], g[1] / 2, rtol=1e-15)


def test_clip_leaves_small_norm():
    g = [np.array([2.0, 0.0])]
    out, norm = clip_global_norm(g, 4.0)
    assert norm == 2.0 and out[0] is g[0]


@given(seed=st.integers(0, 2**16), scale=st.floats(1e-3, 1e3))
def test_clip_vs_flattened_oracle(seed, scale):
    rng = np.random.default_rng(seed)
    g = [rng.normal(size=s) * scale for s in [(3,), (2, 5), (4, 1, 2)]]
    flat = np.concatenate([x.ravel() for x in g])
    n = math.sqrt(sum(v * v for v in flat.tolist()))
    out, norm = clip_global_norm(g, 4.0)
    assert abs(norm - n) <= 1e-12 * n
    expect = flat * min(1.0, 4.0 / n)
    np.testing.assert_allclose(np.concatenate([x.ravel() for x in out]), expect, rtol=1e-12, atol=1e-300)
    assert global_norm(out) <= 4.0 + 1e-6


def test_clip_rejects_nonpositive():
    with pytest.raises(UsageError):
        clip_global_norm([np.ones(2)], 0.0)


# -- Adam ----------------------------------------------------------------------------
def test_adam_first_step_is_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    g = np.array([0.3, -5.0, 1e-3])
    adam_step([p], [g], OptimizerState.zeros_like([p]), lr=0.01)
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01, 3.0 - 0.01], rtol=0, atol=1e-7)


def test_adam_zero_grad_no_move():
    p = Tensor(np.array([1.5]), requires_grad=True)
    adam_step([p], [np.zeros(1)], OptimizerState.zeros_like([p]), lr=0.1)
    assert p.data[0] == 1.5


def test_adam_two_steps_by_hand():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    p = Tensor(np.array([1.0]), requires_grad=True)
    st_ = OptimizerState.zeros_like([p])
    theta, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.5, -0.2], start=1):
        adam_step([p], [np.array([g])], st_, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(p.data[0] - theta) < 1e-12
    assert st_.step == 2


def test_adam_length_mismatch():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(DimensionError):
        adam_step([p], [], OptimizerState.zeros_like([p]), 0.1)


# -- loss ----------------------------------------------------------------------------
def test_l1_values_and_grad():
    pred = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]), requires_grad=True)
    loss = l1_loss(pred, np.array([[1.0, 1.0], [0.0, 3.5]]))
    assert loss.item() == pytest.approx((1 + 0 + 2 + 0.5) / 4)
    backward(loss)
    np.testing.assert_array_equal(pred.grad, np.array([[-1, 0, 1, -1]]).reshape(2, 2) / 4)


def test_l1_shape_mismatch():
    with pytest.raises(DimensionError):
        l1_loss(Tensor(np.zeros(3)), np.zeros(4))


def test_train_config_validation():
    for bad in [dict(lr_final=1e-3), dict(clip_norm=0), dict(epochs=0), dict(beta1=1.0)]:
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


# -- loop ----------------------------------------------------------------------------
def test_training_deterministic_bit_identical():
    data = tiny_data(3)
    cfg = TrainConfig(epochs=5, batch_size=2, seed=7)
    runs = []
    for _ in range(2):
        m, log = train(build_model(TINY, seed=3), data, cfg)
        runs.append((m, log))
    assert len(runs[0][1].step_loss) == 10
    assert runs[0][1].step_loss == runs[1][1].step_loss
    for a, b in zip(runs[0][0].parameters(), runs[1][0].parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_training_reduces_loss_and_clip_bound():
    cfg = TrainConfig(epochs=12, batch_size=2, lr_init=2e-3, clip_norm=0.05)
    _, log = train(build_model(TINY), tiny_data(), cfg)
    assert log.step_loss[-1] < log.step_loss[0]
    assert max(log.clipped_norm) <= 0.05 + 1e-6
    assert any(n > 0.05 for n in log.grad_norm)


def test_max_steps_caps():
    _, log = train(build_model(TINY), tiny_data(3), TrainConfig(epochs=10, batch_size=1, max_steps=4))
    assert len(log.step_loss) == 4


def test_incompatible_data_rejected_before_step():
    model = build_model(TINY)
    before = [p.data.copy() for p in model.parameters()]
    t = synthetic_triple(16, bands=3)
    with pytest.raises(DimensionError):
        train(model, [t], TrainConfig(epochs=1))
    no_gt = ImageTriple(pan=t.pan, lrms=synthetic_triple(16).lrms, gt=None)
    with pytest.raises(DimensionError):
        check_compatible(model, [no_gt])
    mixed = [synthetic_triple(16), synthetic_triple(32)]
    with pytest.raises(DimensionError):
        train(model, mixed, TrainConfig(epochs=1))
    with pytest.raises(UsageError):
        train(model, [], TrainConfig(epochs=1))
    for a, b in zip(before, model.parameters()):
        assert np.array_equal(a, b.data)


def test_logs_written(tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2, eval_every=1)
    _, log = train(build_model(TINY), tiny_data(), cfg)
    log.write_csv(tmp_path / "e.csv")
    log.write_steps_csv(tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "e.csv")))
    assert len(rows) == 2 and {"epoch", "lr", "loss", "psnr", "sam"} <= set(rows[0])
    steps = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(steps) == 2 and float(steps[0]["lr"]) == 5e-4
