import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tempo_snn.core import TauDomainError
from tempo_snn.hierarchy import (ConvSchedule, TauSchedule, conv_schedules, integer_ramp,
                                 linear_tau_means, sample_layer_taus, tanh_tau_means)


def test_linear_zero_delta_is_homogeneous():
    assert np.allclose(linear_tau_means(0.3, 0.0, 4), 0.3)
    assert np.allclose(TauSchedule("homogeneous", 0.3, 0.7, n_layers=3).means(), 0.3)


def test_linear_two_layer_endpoints():
    assert np.allclose(linear_tau_means(0.3, 0.1, 2), [0.25, 0.35], atol=1e-15)


def test_literal_formula_three_layers():
    assert np.allclose(linear_tau_means(0.3, 0.1, 3, literal=True), [0.275, 0.325, 0.375],
                       atol=1e-15)
    assert np.allclose(TauSchedule("paper_literal_linear", 0.3, 0.1, n_layers=3).means(),
                       [0.275, 0.325, 0.375])


def test_tanh_five_layer_example():
    out = tanh_tau_means(0.2, 0.15, 0.5, 0.5, 5)
    assert out[0] == pytest.approx(0.125, abs=1e-12)
    assert out[-1] == pytest.approx(0.275, abs=1e-12)
    # interior values: tanh at l/5, then the affine map of its min/max onto +-delta/2
    g = [math.tanh(0.5 * (l / 5 - 0.5)) for l in range(1, 6)]
    lo, hi = min(g), max(g)
    ref = [0.2 + (2 * (v - lo) / (hi - lo) - 1) * 0.075 for v in g]
    assert np.allclose(out, ref, atol=1e-14)
    assert np.all(np.diff(out) > 0)


def test_tanh_small_steepness_approaches_linear():
    out = tanh_tau_means(0.3, 0.2, 1e-4, 0.5, 5)
    lin = linear_tau_means(0.3, 0.2, 5)
    assert np.allclose(out, lin, atol=1e-6)


def test_tanh_antisymmetric_about_mean():
    # with c = (H+1)/(2H) the arguments s*(l/H - c) are symmetric about zero
    H = 6
    out = tanh_tau_means(0.3, 0.2, 2.0, (H + 1) / (2 * H), H)
    assert np.allclose(out + out[::-1], 2 * 0.3, atol=1e-14)


def test_tanh_degenerate_inputs():
    with pytest.raises(ValueError):
        tanh_tau_means(0.3, 0.2, 0.0, 0.5, 4)
    with pytest.raises(ValueError):
        tanh_tau_means(0.3, 0.2, 1.0, 0.5, 1)


def test_floor_violation_raises():
    with pytest.raises(TauDomainError):
        TauSchedule("linear", 0.05, 0.2, n_layers=2, dt=0.01).means()


taus = st.floats(0.1, 2.0)
deltas = st.floats(-0.15, 0.15)


@settings(max_examples=200)
@given(taus, deltas, st.integers(2, 8))
def test_linear_invariants(mu, delta, H):
    out = linear_tau_means(mu, delta, H)
    assert abs(out.mean() - mu) <= 1e-12
    assert abs((out[-1] - out[0]) - delta) <= 1e-12
    mirror = linear_tau_means(mu, -delta, H)
    assert np.allclose(mirror, out[::-1], atol=1e-12)
    assert np.allclose(mirror - mu, -(out - mu), atol=1e-12)


@settings(max_examples=200)
@given(taus, deltas, st.floats(0.05, 5.0), st.floats(-1.0, 2.0), st.integers(2, 8))
def test_tanh_invariants(mu, delta, s, c, H):
    out = tanh_tau_means(mu, delta, s, c, H)
    # range endpoints are exactly mu -+ |delta|/2
    assert abs(out.min() - (mu - abs(delta) / 2)) <= 1e-12
    assert abs(out.max() - (mu + abs(delta) / 2)) <= 1e-12
    assert abs((out[-1] - out[0]) - delta) <= 1e-12
    # sign flip mirrors the schedule about mu
    flipped = tanh_tau_means(mu, -delta, s, c, H)
    assert np.allclose(flipped - mu, -(out - mu), atol=1e-12)


def test_sample_std_large_n():
    rng = np.random.default_rng(0)
    x = sample_layer_taus(0.2, 100_000, rng)
    assert abs(x.std() - 0.04) <= 0.02 * 0.04


def test_sample_reproducible_and_floored():
    a = sample_layer_taus(0.2, 50, np.random.default_rng(5))
    b = sample_layer_taus(0.2, 50, np.random.default_rng(5))
    assert np.array_equal(a, b)
    c = sample_layer_taus(0.015, 1000, np.random.default_rng(1), dt=0.01)
    assert np.all(c >= 0.015)


def test_conv_schedule_examples():
    k, d = conv_schedules(5, 0, 5, 0, 2)
    assert k.tolist() == [5, 5] and d.tolist() == [5, 5]
    assert conv_schedules(5, 4, 5, 0, 2)[0].tolist() == [3, 7]
    assert conv_schedules(5, 0, 5, 2, 2)[1].tolist() == [4, 6]
    assert ConvSchedule(5, -4, 5, 0, 2).kernels_and_dilations()[0].tolist() == [7, 3]


@given(st.integers(1, 9), st.integers(-8, 8), st.integers(2, 6))
def test_integer_ramp_properties(mean, delta, H):
    r = integer_ramp(mean, delta, H)
    assert abs(r[0] - (mean - delta / 2)) <= 0.5
    assert abs(r[-1] - (mean + delta / 2)) <= 0.5
    assert np.all(np.diff(r) * np.sign(delta) >= 0)
    assert np.array_equal(integer_ramp(mean, -delta, H), r[::-1])


def test_conv_schedule_rejects_nonpositive():
    with pytest.raises(ValueError):
        conv_schedules(2, 6, 5, 0, 2)
