import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats

from conftest import primal_el_ratio
from hdel.el_core import (
    DegenerateMomentError,
    chi2_quantile,
    el_ratio,
    marginal_el_ratio,
    marginal_el_ratios,
    normal_quantile,
    solve_lambda,
)
from hdel.moments import Dataset, FunctionModel


def test_zero_mean_columns_give_zero_ratio():
    G = np.array([[1.0, -2.0], [-1.0, 2.0], [0.5, 1.0], [-0.5, -1.0]])
    sol = solve_lambda(G)
    assert sol.converged
    assert np.allclose(sol.lam, 0.0)
    assert sol.log_el_ratio == pytest.approx(0.0, abs=1e-12)


def test_scalar_dual_matches_root_finding():
    g = np.array([-1.0, 0.5, 1.0])
    root = optimize.brentq(lambda l: np.sum(g / (1 + l * g)), -1 / 1.0 + 1e-9, 1 / 1.0 - 1e-9, xtol=1e-14)
    sol = solve_lambda(g[:, None])
    assert sol.lam[0] == pytest.approx(root, abs=1e-8)
    assert sol.log_el_ratio == pytest.approx(2 * np.sum(np.log1p(root * g)), abs=1e-8)
    assert marginal_el_ratio(g) == pytest.approx(sol.log_el_ratio, abs=1e-8)


def test_weights_sum_to_one_inside_domain(rng):
    G = rng.standard_normal((40, 3)) + 0.2
    sol = solve_lambda(G)
    assert sol.converged and sol.inside
    w = sol.weights(G)
    assert np.all(w > 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-8)
    assert np.abs(w @ G).max() < 1e-8


def test_n4_matches_primal_bruteforce():
    g = np.array([-1.3, 0.4, 2.0, 0.7])
    assert solve_lambda(g[:, None]).log_el_ratio == pytest.approx(primal_el_ratio(g), abs=1e-5)


def test_el_ratio_through_model():
    model = FunctionModel(1, 1, lambda x, th: np.array([x[0] - th[0]]))
    data = Dataset.flat(np.array([[1.0], [2.0], [4.0]]))
    assert el_ratio(model, data, [7.0 / 3.0]) == pytest.approx(0.0, abs=1e-12)
    g = np.array([1.0, 2.0, 4.0]) - 2.0
    assert el_ratio(model, data, [2.0]) == pytest.approx(primal_el_ratio(g), abs=1e-5)


def test_zero_variance_column_is_degenerate():
    G = np.column_stack([np.ones(5), np.arange(5.0)])
    G[:, 0] = 0.0
    with pytest.raises(DegenerateMomentError):
        solve_lambda(G)
    with pytest.raises(DegenerateMomentError):
        marginal_el_ratio(np.zeros(6))


def test_marginal_ratios_nan_mode_flags_degenerate():
    G = np.column_stack([np.zeros(6), np.linspace(-1, 2, 6)])
    out = marginal_el_ratios(G, on_degenerate="nan")
    assert math.isnan(out[0]) and out[1] > 0


def test_self_studentization_for_small_mean(rng):
    x = rng.standard_normal(400)
    x = x - x.mean() + 0.02
    ell = marginal_el_ratio(x)
    approx = len(x) * x.mean() ** 2 / np.mean(x**2)
    assert abs(ell - approx) <= 0.05 * ell


@pytest.mark.parametrize("df,prob", [(1, 0.95), (2, 0.95), (3, 0.9), (10, 0.99), (60, 0.5), (0.5, 0.3)])
def test_chi2_quantile_matches_scipy(df, prob):
    assert chi2_quantile(df, prob) == pytest.approx(stats.chi2.ppf(prob, df), abs=1e-8, rel=1e-10)


def test_chi2_quantile_known_values():
    assert chi2_quantile(1, 0.95) == pytest.approx(3.841458820694124, abs=1e-8)
    assert chi2_quantile(2, 0.95) == pytest.approx(-2 * math.log(0.05), abs=1e-8)


@pytest.mark.parametrize("prob", [1e-10, 0.01, 0.3, 0.5, 0.9, 0.975, 1 - 1e-12])
def test_normal_quantile_matches_scipy(prob):
    assert normal_quantile(prob) == pytest.approx(stats.norm.ppf(prob), abs=1e-8)


def test_quantiles_reject_bad_probabilities():
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            normal_quantile(bad)
        with pytest.raises(ValueError):
            chi2_quantile(1, bad)
    with pytest.raises(ValueError):
        chi2_quantile(0, 0.5)


def test_el_ratio_mean_is_close_to_df():
    # ell at the truth is approximately chi^2_r, so its Monte-Carlo mean is near r
    rng = np.random.default_rng(3)
    r, vals = 3, []
    for _ in range(400):
        vals.append(solve_lambda(rng.standard_normal((200, r))).log_el_ratio)
    assert abs(np.mean(vals) - r) <= 0.2 * r


small = st.lists(st.floats(-5, 5, allow_nan=False).filter(lambda v: abs(v) > 1e-3), min_size=3, max_size=5)


@settings(max_examples=40, deadline=None)
@given(small)
def test_dual_equals_primal_on_small_instances(values):
    g = np.array(values)
    if g.min() >= 0 or g.max() <= 0 or np.ptp(g) < 1e-2:
        return  # zero outside the convex hull of the data: the primal is infeasible
    lo, hi = g.min(), g.max()
    if min(-lo, hi) < 0.05 * (hi - lo):
        return  # too close to the hull boundary for a well-conditioned comparison
    assert solve_lambda(g[:, None]).log_el_ratio == pytest.approx(primal_el_ratio(g), abs=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.sampled_from([-1.0, 1.0]))
def test_scale_invariance(seed, c, sign):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((30, 2)) + 0.3
    base = solve_lambda(G).log_el_ratio
    G2 = G.copy()
    G2[:, 1] *= sign * c
    assert solve_lambda(G2).log_el_ratio == pytest.approx(base, rel=1e-6, abs=1e-8)
    assert marginal_el_ratio(G2[:, 1]) == pytest.approx(marginal_el_ratio(G[:, 1]), rel=1e-6, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_appending_a_column_never_decreases_ratio(seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((40, 3)) + rng.normal(0, 0.2, 3)
    assert solve_lambda(G).log_el_ratio >= solve_lambda(G[:, :2]).log_el_ratio - 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_newton_converges_quickly_inside_hull(seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((50, 4)) + rng.normal(0, 0.1, 4)
    sol = solve_lambda(G)
    assert sol.converged and sol.iterations <= 100
    assert sol.gradient_norm <= 1e-8 * 50
