import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tempo_snn.autograd import Gradients, LayerGrad
from tempo_snn.core import HiddenLayer, LayerParams, NetworkSpec, SimGrid, init_params
from tempo_snn.datasets import SpikeDataset
from tempo_snn.training import (AdamState, DataSplits, OptimSpec, compute_loss, evaluate,
                                learning_rate, loss_double_softmax, loss_max_windows, loss_sum,
                                optimizer_step, predict, tau_regularizer, train)


def test_loss_sum_uniform_is_ln2():
    for T in (1, 7, 50):
        assert loss_sum(np.full((T, 2), 0.3), 1) == pytest.approx(math.log(2), abs=1e-15)


def test_loss_sum_saturates():
    out = np.zeros((4, 3))
    out[:, 2] = 200.0
    assert loss_sum(out, 2) < 1e-80


def test_loss_sum_extended_precision_oracle():
    out = np.array([[0.3, -1.2, 2.5], [1.7, 0.1, -0.4]])
    y = 1
    mpmath.mp.dps = 40
    ref = mpmath.mpf(0)
    for row in out:
        z = [mpmath.mpf(float(v)) for v in row]
        ref += -(z[y] - mpmath.log(sum(mpmath.exp(v) for v in z)))
    ref /= 2
    assert loss_sum(out, y) == pytest.approx(float(ref), abs=1e-14)


def test_loss_max_windows_reductions():
    out = np.tile([[0.4, 1.1]], (10, 1))
    # one window over all of T with constant voltages is one-step cross entropy
    ce = -(1.1 - math.log(math.exp(0.4) + math.exp(1.1)))
    assert loss_max_windows(out, np.array([[0, 10, 1]])) == pytest.approx(ce, abs=1e-15)
    # two windows with opposite labels at the symmetric point
    sym = np.zeros((10, 2))
    assert loss_max_windows(sym, np.array([[0, 5, 0], [5, 10, 1]])) == pytest.approx(math.log(2))


def naive_max_loss(out, windows):
    total = 0.0
    for s, e, y in windows:
        m = [max(out[t, n] for t in range(s, e)) for n in range(out.shape[1])]
        total += -(m[y] - math.log(sum(math.exp(v) for v in m)))
    return total / len(windows)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_loss_max_windows_matches_naive(seed):
    rng = np.random.default_rng(seed)
    out = rng.normal(size=(20, 3))
    windows = np.array([[0, 6, rng.integers(3)], [6, 13, rng.integers(3)],
                        [13, 20, rng.integers(3)]])
    assert loss_max_windows(out, windows) == pytest.approx(naive_max_loss(out, windows),
                                                           abs=1e-12)


@pytest.mark.parametrize("kind", ["sum_softmax", "max_over_windows", "double_softmax"])
def test_loss_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(0)
    out = rng.normal(size=(2, 12, 3))
    y = np.array([0, 2])
    w = np.array([[[0, 6, 1], [6, 12, 2]], [[0, 6, 0], [6, 12, 1]]])
    _, g = compute_loss(kind, out, y, w, return_grad=True)
    eps = 1e-6
    fd = np.zeros_like(out)
    for i in np.ndindex(out.shape):
        o = out.copy()
        o[i] += eps
        lp = compute_loss(kind, o, y, w)
        o[i] -= 2 * eps
        lm = compute_loss(kind, o, y, w)
        fd[i] = (lp - lm) / (2 * eps)
    assert np.allclose(g, fd, atol=1e-8)


def test_tau_regularizer_values():
    assert tau_regularizer([np.full(5, 0.3)]) == 0
    assert tau_regularizer([np.array([0.1, 0.3])]) == pytest.approx(0.02, abs=1e-15)
    a = np.array([0.1, 0.25, 0.4])
    assert tau_regularizer([a + 0.5]) == pytest.approx(tau_regularizer([a]), abs=1e-14)
    _, g = tau_regularizer([np.array([0.1, 0.3])], return_grad=True)
    assert np.allclose(g[0], [-0.2, 0.2])


def test_learning_rate_schedule():
    o = OptimSpec(epochs=60)
    assert learning_rate(o, 0) == 0.01
    assert learning_rate(o, 25) == 0.01
    assert learning_rate(o, 59) == pytest.approx(0.005, abs=1e-15)
    lrs = [learning_rate(o, e) for e in range(60)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def _scalar_params(w):
    return [LayerParams("dense", np.array([[w]]), np.array([0.1])),
            LayerParams("dense", np.array([[0.0]]), np.array([0.2]))]


def test_adam_zero_gradient_leaves_params():
    params = _scalar_params(1.5)
    state = AdamState.zeros(params)
    g = Gradients([LayerGrad(np.zeros((1, 1)), np.zeros(1)) for _ in params])
    optimizer_step(params, g, state, 0.01, OptimSpec(train_tau=True), 0.01)
    assert params[0].W[0, 0] == 1.5 and params[0].tau[0] == 0.1


def test_adam_quadratic_bowl():
    params = _scalar_params(3.0)
    state = AdamState.zeros(params)
    o = OptimSpec(tau_preconditioning=False)
    for _ in range(500):
        w = params[0].W[0, 0]
        g = Gradients([LayerGrad(np.array([[2 * (w - 2.5)]]), np.zeros(1)),
                       LayerGrad(np.zeros((1, 1)), np.zeros(1))])
        optimizer_step(params, g, state, 0.01, o, 0.01)
    assert abs(params[0].W[0, 0] - 2.5) < 1e-2


def test_preconditioned_step_is_adam_on_gain_scaled_weights():
    tau = np.array([0.05, 0.3, 0.6])
    w1, w2 = np.random.default_rng(1).normal(size=(2, 3)), np.random.default_rng(2).normal(size=(3, 1))
    a = [LayerParams("dense", w1.copy(), tau.copy()), LayerParams("dense", w2.copy(), np.array([0.2]))]
    b = [p.copy() for p in a]
    rng = np.random.default_rng(0)
    W0 = [p.W.copy() for p in a]
    sa, sb = AdamState.zeros(a), AdamState.zeros(b)
    for _ in range(3):
        g = Gradients([LayerGrad(rng.normal(size=p.W.shape), np.zeros_like(p.tau)) for p in a])
        optimizer_step(a, g, sa, 0.01, OptimSpec(tau_preconditioning=False), 0.01)
        optimizer_step(b, g, sb, 0.01, OptimSpec(tau_preconditioning=True), 0.01)
    for pa, pb, w0 in zip(a, b, W0):
        gain = 1 - np.exp(-0.01 / pa.tau)
        assert np.allclose(pb.W - w0, (pa.W - w0) / gain, rtol=1e-12, atol=0)


def test_adam_tau_clamped_and_gated():
    params = _scalar_params(1.0)
    state = AdamState.zeros(params)
    g = Gradients([LayerGrad(np.zeros((1, 1)), np.array([1e6])),
                   LayerGrad(np.zeros((1, 1)), np.zeros(1))])
    optimizer_step(params, g, state, 0.01, OptimSpec(train_tau=False), 0.01)
    assert params[0].tau[0] == 0.1
    for _ in range(20):
        optimizer_step(params, g, state, 0.01, OptimSpec(train_tau=True), 0.01)
    assert params[0].tau[0] == pytest.approx(0.015)


def test_adam_rejects_nonfinite():
    params = _scalar_params(1.0)
    g = Gradients([LayerGrad(np.array([[np.nan]]), np.zeros(1)),
                   LayerGrad(np.zeros((1, 1)), np.zeros(1))])
    with pytest.raises(FloatingPointError):
        optimizer_step(params, g, AdamState.zeros(params), 0.01, OptimSpec(), 0.01)
    assert params[0].W[0, 0] == 1.0


def test_predict_oracle_and_chance():
    out = np.zeros((5, 10, 4))
    y = np.array([0, 3, 1, 2, 3])
    out[np.arange(5), :, y] = 5.0
    assert np.array_equal(predict("sum_softmax", out), y)
    rng = np.random.default_rng(0)
    r = rng.normal(size=(20000, 3, 4))
    acc = np.mean(predict("sum_softmax", r) == rng.integers(0, 4, 20000))
    assert abs(acc - 0.25) < 0.015


def _rate_task(n, rng, T=20):
    # two classes told apart by which half of the channels fires
    y = rng.integers(0, 2, size=n)
    lam = np.full((n, T, 8), 0.05)
    lam[y == 0, :, :4] = 0.6
    lam[y == 1, :, 4:] = 0.6
    x = (rng.random((n, T, 8)) < lam).astype(np.uint8)
    return SpikeDataset(x, y, SimGrid(0.01, T), 2)


def _rate_setup(seed=0):
    rng = np.random.default_rng(seed)
    train_ds, valid, test = _rate_task(256, rng), _rate_task(128, rng), _rate_task(128, rng)
    spec = NetworkSpec(SimGrid(0.01, 20), 8, (HiddenLayer(12),), 2)
    params = init_params(spec, [np.full(12, 0.1)], rng, gain=3.0)
    return spec, params, DataSplits(train_ds, valid, test)


def test_learnable_toy_task():
    spec, params, data = _rate_setup()
    o = OptimSpec(epochs=20, batch_size=32, dropout_p=0.0, seed=1)
    best, m = train(spec, o, data, params, "sum_softmax")
    train_acc = max(r.accuracy for r in m.split_rows("train"))
    assert train_acc >= 0.99
    assert m.test_accuracy >= 0.95


def test_zero_epochs_returns_init():
    spec, params, data = _rate_setup()
    best, m = train(spec, OptimSpec(epochs=0), data, params, "sum_softmax")
    assert all(np.array_equal(a.W, b.W) for a, b in zip(best, params))
    assert {r.epoch for r in m.rows} == {0}
    assert m.best_epoch == 0
    assert m.test_accuracy == evaluate(spec, params, data.test, "sum_softmax")[0]


def test_training_deterministic():
    spec, params, data = _rate_setup()
    o = OptimSpec(epochs=3, batch_size=64, seed=5)
    _, m1 = train(spec, o, data, params, "sum_softmax")
    _, m2 = train(spec, o, data, params, "sum_softmax")
    assert m1.rows == m2.rows


def test_evaluate_side_effect_free():
    spec, params, data = _rate_setup()
    a = evaluate(spec, params, data.test, "sum_softmax")
    b = evaluate(spec, params, data.test, "sum_softmax")
    assert a == b


def test_train_does_not_mutate_input_params():
    spec, params, data = _rate_setup()
    before = [p.W.copy() for p in params]
    train(spec, OptimSpec(epochs=1, batch_size=64), data, params, "sum_softmax")
    assert all(np.array_equal(a, p.W) for a, p in zip(before, params))


def test_double_softmax_uniform():
    assert loss_double_softmax(np.zeros((6, 2)), 0) == pytest.approx(math.log(2))
