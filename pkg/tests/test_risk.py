import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deltafl import risk

import oracles

V = [1.0, 2.0, 3.0, 4.0]

# frozen from oracles.smoothed_bisection, cross-checked with a conic solver
SMOOTH_W_NU1 = [0.04501529, 0.12236424, 0.33262048, 0.5]
SMOOTH_VAL_NU05 = 3.1891593168450023


@pytest.mark.parametrize("theta, expected", [(0.5, 2.0), (0.25, 3.0)])
def test_quantile_examples(theta, expected):
    assert risk.quantile(V, theta) == expected == oracles.quantile_scan(V, theta)


def test_quantile_degenerate():
    for theta in (0.01, 0.3, 1.0):
        assert risk.quantile([7.5] * 3, theta) == 7.5


def test_empty_distribution():
    with pytest.raises(ValueError, match="empty distribution"):
        risk.quantile([], 0.5)
    with pytest.raises(ValueError):
        risk.superquantile([], 0.5)
    with pytest.raises(ValueError):
        risk.dual_weights([], 0.5)


def test_invalid_weights_and_theta():
    with pytest.raises(ValueError):
        risk.LossVector([1, 2], [0.3, 0.3])
    with pytest.raises(ValueError):
        risk.LossVector([1, math.nan])
    with pytest.raises(ValueError):
        risk.superquantile(V, 0.0)
    with pytest.raises(ValueError):
        risk.superquantile(V, 1.5)


@pytest.mark.parametrize("theta, expected", [(0.5, 3.5), (0.25, 4.0), (1.0, 2.5)])
def test_superquantile_examples(theta, expected):
    assert risk.superquantile(V, theta) == pytest.approx(expected, abs=1e-12)
    assert oracles.superquantile_exact_integral(V, theta) == pytest.approx(expected, abs=1e-12)


def test_theta_one_is_weighted_mean():
    rng = np.random.default_rng(3)
    v = rng.normal(size=9)
    w = rng.dirichlet(np.ones(9))
    assert risk.superquantile(v, 1.0, w) == pytest.approx(float(w @ v), abs=1e-12)


def test_dual_weights_examples():
    np.testing.assert_allclose(risk.dual_weights(V, 0.5), [0, 0, 0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(risk.dual_weights([5, 5, 5, 5], 0.5), [0.25] * 4, atol=1e-12)
    lp, _ = oracles.dual_lp(V, 0.3)
    pi = risk.dual_weights(V, 0.3)
    np.testing.assert_allclose(pi, lp, atol=1e-9)
    assert pi @ np.array(V) == pytest.approx(risk.superquantile(V, 0.3), abs=1e-12)


def test_dual_weights_tie_split_at_boundary():
    # the top two are tied and share the residual 1 - 0 equally under cap 1/(0.25*6)
    pi = risk.dual_weights([1, 3, 3, 2, 0, 1], 0.25)
    assert pi[1] == pytest.approx(pi[2])
    assert pi.sum() == pytest.approx(1.0)
    assert pi.max() <= 1 / (0.25 * 6) + 1e-12


def test_weighted_superquantile_matches_lp():
    v = [0.5, 2.0, 1.0, 3.0]
    w = [0.1, 0.4, 0.3, 0.2]
    pi_lp, val = oracles.dual_lp(v, 0.35, w)
    np.testing.assert_allclose(risk.dual_weights(v, 0.35, w), pi_lp, atol=1e-9)
    assert risk.superquantile(v, 0.35, w) == pytest.approx(val, abs=1e-9)
    assert risk.superquantile(v, 0.35, w) == pytest.approx(
        oracles.superquantile_exact_integral(v, 0.35, w), abs=1e-12)


def test_smoothed_weights_examples():
    np.testing.assert_allclose(risk.smoothed_weights(V, 1.0, 0.7), [0.25] * 4, atol=1e-12)
    np.testing.assert_allclose(risk.smoothed_weights(V, 0.5, 1e-6), [0, 0, 0.5, 0.5], atol=1e-3)
    np.testing.assert_allclose(risk.smoothed_weights(V, 0.5, 1.0), SMOOTH_W_NU1, atol=1e-8)
    np.testing.assert_allclose(risk.smoothed_weights(V, 0.5, 1.0),
                               oracles.smoothed_bisection(V, 0.5, 1.0), atol=1e-12)


def test_smoothed_superquantile_examples():
    assert risk.smoothed_superquantile(V, 0.5, 0.5) == pytest.approx(SMOOTH_VAL_NU05, abs=1e-10)
    assert risk.smoothed_superquantile([2.0] * 5, 0.4, 0.3) == pytest.approx(2.0, abs=1e-12)
    nu = 1e-4
    gap = abs(risk.smoothed_superquantile(V, 0.5, nu) - risk.superquantile(V, 0.5))
    assert gap <= 2 * nu * math.log(4)


def test_smoothed_needs_positive_nu():
    with pytest.raises(ValueError, match="use dual_weights"):
        risk.smoothed_weights(V, 0.5, 0.0)
    with pytest.raises(ValueError):
        risk.smoothed_superquantile(V, 0.5, -1.0)


def test_smoothed_kkt():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        v = rng.normal(size=n) * rng.uniform(0.1, 5)
        theta = float(rng.uniform(0.05, 1.0))
        nu = float(10 ** rng.uniform(-3, 1))
        pi = risk.smoothed_weights(v, theta, nu)
        cap = 1 / (theta * n)
        assert pi.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(pi >= 0) and np.all(pi <= cap + 1e-9)
        # unconstrained softmax level implied by the uncapped coordinates
        free = pi < cap * (1 - 1e-9)
        if free.any():
            i = np.flatnonzero(free)[np.argmax(pi[free])]
            log_soft = np.log(pi[i]) + (v - v[i]) / nu
            assert np.all(log_soft[~free] >= np.log(cap) - 1e-7)
            assert np.all(log_soft[free] <= np.log(cap) + 1e-7)
        np.testing.assert_allclose(pi, oracles.smoothed_bisection(v, theta, nu), atol=1e-9)


def test_entropic_risk_examples():
    assert risk.entropic_risk([3.3] * 3, 2.0) == pytest.approx(3.3, abs=1e-12)
    assert risk.entropic_risk(V, 1e-8) == pytest.approx(2.5, abs=1e-6)
    # 40-digit evaluation of log((e + e^2 + e^3 + e^4) / 4)
    assert risk.entropic_risk(V, 1.0) == pytest.approx(3.053895337441304711658, abs=1e-13)
    assert risk.entropic_risk([1e4, 0.0], 10.0) <= 1e4
    with pytest.raises(ValueError):
        risk.entropic_risk(V, 0.0)


def test_tilted_weights_limits():
    np.testing.assert_allclose(risk.tilted_weights(V, 1e-10), [0.25] * 4, atol=1e-9)
    np.testing.assert_allclose(risk.tilted_weights(V, 1e4), [0, 0, 0, 1], atol=1e-12)
    ref = np.exp(np.array(V)) / np.exp(np.array(V)).sum()
    np.testing.assert_allclose(risk.tilted_weights(V, 1.0), ref, rtol=1e-12)


losses = st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=30)
thetas = st.floats(0.01, 1.0)


@settings(max_examples=200, deadline=None)
@given(losses, thetas, st.floats(0.01, 10.0), st.floats(0.01, 5.0))
def test_translation_equivariance(v, theta, shift, nu):
    v = np.array(v)
    assert risk.quantile(v + shift, theta) == pytest.approx(risk.quantile(v, theta) + shift, abs=1e-9)
    assert risk.superquantile(v + shift, theta) == pytest.approx(
        risk.superquantile(v, theta) + shift, abs=1e-9)
    assert risk.smoothed_superquantile(v + shift, theta, nu) == pytest.approx(
        risk.smoothed_superquantile(v, theta, nu) + shift, abs=1e-9)
    assert risk.entropic_risk(v + shift, nu) == pytest.approx(
        risk.entropic_risk(v, nu) + shift, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(losses, thetas, thetas)
def test_bounds_and_monotone_in_theta(v, t1, t2):
    v = np.array(v)
    lo, hi = sorted((t1, t2))
    sq_lo, sq_hi = risk.superquantile(v, lo), risk.superquantile(v, hi)
    assert v.mean() - 1e-9 <= sq_hi <= sq_lo + 1e-9 <= v.max() + 2e-9
    assert risk.quantile(v, hi) <= risk.quantile(v, lo)


@settings(max_examples=200, deadline=None)
@given(losses, thetas, st.randoms(use_true_random=False))
def test_permutation_equivariance(v, theta, rnd):
    v = np.array(v)
    perm = list(range(v.size))
    rnd.shuffle(perm)
    np.testing.assert_allclose(risk.dual_weights(v[perm], theta), risk.dual_weights(v, theta)[perm],
                               atol=1e-12)


def test_dual_consistency_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        v = rng.normal(size=n) * 3
        if rng.random() < 0.3:
            v = np.round(v)  # exercise ties
        theta = float(rng.uniform(0.01, 1.0))
        pi = risk.dual_weights(v, theta)
        assert pi @ v == pytest.approx(risk.superquantile(v, theta), abs=1e-8)


def test_integration_oracle_small_n():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(1, 9))
        v = rng.uniform(0, 1, size=n)
        for theta in (0.1, 0.25, 0.4, 0.5, 0.77, 1.0):
            assert risk.superquantile(v, theta) == pytest.approx(
                oracles.superquantile_grid(v, theta), abs=1e-5)


def test_smoothed_feasibility_and_optimality():
    rng = np.random.default_rng(9)
    for _ in range(300):
        n = int(rng.integers(2, 30))
        v = rng.uniform(0, 3, size=n)
        theta, nu = float(rng.uniform(0.05, 1)), float(rng.uniform(0.01, 2))
        pi = risk.smoothed_weights(v, theta, nu)
        uniform = np.full(n, 1 / n)
        assert risk.smoothed_objective(pi, v, nu) >= risk.smoothed_objective(uniform, v, nu) - 1e-12
        gap = abs(risk.smoothed_superquantile(v, theta, nu) - risk.superquantile(v, theta))
        assert gap <= 2 * nu * math.log(n) + 1e-12
