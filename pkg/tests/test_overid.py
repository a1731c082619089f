import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hdel.el_core import chi2_quantile, marginal_el_ratio
from hdel.moments import Dataset, FunctionModel, gen_overid_mean, make_mean_overid_model
from hdel.overid import (
    build_w_hat,
    critical_value,
    make_index_sets,
    multiplier_draws,
    run_overid_test,
    select_J,
    test_statistic as overid_statistic,
)
from hdel.penalized import PELFit, PenaltySpec, fit_penalized_el

from oracles import w_hat_direct


def fake_fit(theta, lam, nu=0.1):
    theta, lam = np.asarray(theta, float), np.asarray(lam, float)
    return PELFit(theta=theta, lam=lam, moment_support=tuple(np.flatnonzero(lam)),
                  support=tuple(np.flatnonzero(theta)), objective=0.0, trace=[], pi=0.1, nu=nu,
                  converged=True, iterations=1, p2=PenaltySpec("l1", nu))


def toy_model():
    """Three moments in two parameters with a nonlinear third moment."""
    def g(x, t):
        return np.array([x[0] - t[0], x[1] - t[1], x[2] - t[0] * t[1]])

    def jac(x, t):
        return np.array([[-1.0, 0.0], [0.0, -1.0], [-t[1], -t[0]]])

    return FunctionModel(3, 2, g, jac)


@pytest.fixture
def toy():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(150, 3)) @ np.array([[1, 0.3, 0.2], [0, 1, 0.4], [0, 0, 1.0]]) + [1.0, 2.0, 2.0]
    return toy_model(), Dataset.flat(x)


def test_index_set_validation():
    sets = make_index_sets([3, 1], [1, 2], [0], r=5)
    assert sets.J == (1, 3) and sets.RJ == (1,) and sets.RJc == (2,) and sets.RcJ == (3,)
    assert sets.J_order == (1, 3) and sets.I_order == (1, 2, 3)
    with pytest.raises(ValueError):
        make_index_sets([], [1], [0], r=5)
    with pytest.raises(IndexError):
        make_index_sets([7], [1], [0], r=5)


def test_select_J_modes(toy):
    model, data = toy
    fit = fake_fit([1.0, 2.0], [0.0, 0.2, 0.0])
    assert select_J(fit, "Rn").J == (1,)
    assert select_J(fit, "all").J == (0, 1, 2)
    assert select_J(fit, "custom", custom=[2, 0]).J == (0, 2)
    with pytest.raises(ValueError):
        select_J(fit, "random")
    empty = fake_fit([1.0, 2.0], [0.0, 0.0, 0.0])
    fb = select_J(empty, "Rn", model, data, fallback=2)
    assert fb.provenance == "Rn-fallback" and len(fb.J) == 2
    with pytest.raises(ValueError):
        select_J(empty, "Rn")


def test_w_hat_matches_direct_formula(toy):
    model, data = toy
    theta = np.array([1.05, 1.9])
    G = model.moments(data, theta)
    gam = model.mean_jacobian(data, theta)
    for J, R in (([0, 2], [0, 1]), ([2], [0, 1]), ([0, 1, 2], [1, 2]), ([1, 2], [0, 1, 2])):
        sets = make_index_sets(J, R, [0, 1], 3)
        w = build_w_hat(model, data, theta, sets)
        W, Jord = w_hat_direct(G, gam, J, R, [0, 1])
        assert tuple(Jord) == w.J_order
        assert np.allclose(w.W, W, atol=1e-10)
        assert np.all(np.linalg.eigvalsh(w.W) >= -1e-10)


def test_J_equal_R_degenerate_block(toy):
    model, data = toy
    theta = np.array([1.0, 2.0])
    # |R| = |S| with J = R: Q annihilates the span of the gradient, W is singular
    w = build_w_hat(model, data, theta, make_index_sets([0, 1], [0, 1], [0, 1], 3))
    assert np.allclose(w.W, 0, atol=1e-10)


def test_no_selected_parameters_gives_unit_diagonal(toy):
    model, data = toy
    w = build_w_hat(model, data, np.array([1.0, 2.0]), make_index_sets([0, 1, 2], [0], [], 3))
    assert np.allclose(w.B, 0)
    assert np.allclose(np.diag(w.W), 1.0)


def test_statistic_is_max_of_marginals_and_ignores_duplicates(toy):
    model, data = toy
    theta = np.array([0.9, 2.1])
    T, ratios, bad = overid_statistic(model, data, theta, [0, 1, 2])
    G = model.moments(data, theta)
    assert T == pytest.approx(max(marginal_el_ratio(G[:, j]) for j in range(3)))
    assert bad == []
    T2, _, _ = overid_statistic(model, data, theta, [0, 1, 2, 2, 0])
    assert T2 == T


def test_degenerate_moment_excluded_with_warning():
    model = FunctionModel(2, 1, lambda x, t: np.array([x[0] - t[0], 0.0 * x[1]]))
    data = Dataset.flat(np.random.default_rng(0).normal(size=(30, 2)))
    with pytest.warns(UserWarning, match="zero variance"):
        T, ratios, bad = overid_statistic(model, data, [0.1], [0, 1])
    assert bad == [1] and math.isnan(ratios[1]) and np.isfinite(T)


def identity_w(n=400, q=3, seed=0):
    """A W_hat whose multiplier draws are exactly N(0, I_q) given the data."""
    rng = np.random.default_rng(seed)
    Z, _ = np.linalg.qr(rng.standard_normal((n, q)))
    G = Z * math.sqrt(n)
    model = FunctionModel(q, 1, lambda x, t: x)
    w = build_w_hat(model, Dataset.flat(G), [0.0], make_index_sets(range(q), [], [], q))
    assert np.allclose(w.W, np.eye(q), atol=1e-12)
    return w


def test_critical_value_single_moment():
    w = identity_w(q=1)
    cv = critical_value(w, 0.05, M=20_000, seed=1).cv
    assert cv == pytest.approx(3.841, abs=0.15)


def test_critical_value_independent_moments():
    q = 4
    w = identity_w(q=q)
    crit = critical_value(w, 0.05, M=100_000, seed=2)
    expect = chi2_quantile(1, 0.95 ** (1 / q))
    assert crit.cv == pytest.approx(expect, rel=0.03)


def test_draws_covariance_matches_w(toy):
    model, data = toy
    sets = make_index_sets([0, 2], [0, 1], [0], 3)
    w = build_w_hat(model, data, np.array([1.0, 2.0]), sets)
    M = 100_000
    draws = multiplier_draws(w, M, seed=5)
    emp = draws.T @ draws / M
    scale = np.sqrt(np.outer(np.diag(w.W), np.diag(w.W)))
    assert np.all(np.abs(emp - w.W) <= 5 * scale / math.sqrt(M))


def test_draws_deterministic_and_blockwise(toy):
    model, data = toy
    w = build_w_hat(model, data, np.array([1.0, 2.0]), make_index_sets([0, 1, 2], [0], [0], 3))
    a = multiplier_draws(w, 2500, seed=9)
    assert np.array_equal(a, multiplier_draws(w, 2500, seed=9))
    # the first blocks do not depend on the total count
    assert np.array_equal(a[:1000], multiplier_draws(w, 1000, seed=9))
    assert not np.array_equal(a, multiplier_draws(w, 2500, seed=10))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.001, 0.5), st.floats(0.001, 0.5))
def test_cv_monotone_in_alpha(a1, a2):
    w = identity_w(n=100, q=2, seed=1)
    lo, hi = sorted((a1, a2))
    assert critical_value(w, lo, 2000, 0).cv >= critical_value(w, hi, 2000, 0).cv


def test_p_value_on_grid():
    w = identity_w(n=100, q=2)
    crit = critical_value(w, 0.05, M=2000, seed=0)
    for T in (0.0, 1.0, crit.cv, 50.0):
        p = crit.p_value(T)
        assert 0 <= p <= 1 and (p * 2000).is_integer()
        assert p == np.mean(crit.stats >= T)
    assert crit.p_value(0.0) == 1.0 and crit.p_value(1e9) == 0.0


def test_run_overid_test_outcome_and_serialisation():
    data = gen_overid_mean(100, 20, case=1, seed=4)
    model = make_mean_overid_model(20)
    s = math.sqrt(math.log(21) / 100)
    fit = fit_penalized_el(model, data, 0.5 * s, 0.5 * s)
    out = run_overid_test(model, data, fit, M=2000, seed=1)
    assert out.reject == (out.T_n > out.cv)
    assert out.p_value == pytest.approx(np.mean(critical_value(
        build_w_hat(model, data, out.theta, make_index_sets(out.J, out.R_n, fit.support, 21)),
        0.05, 2000, 1).stats >= out.T_n)) or out.diagnostics
    d = json.loads(out.to_json())
    assert d["J_mode"] in ("Rn", "Rn-fallback") and d["M"] == 2000
    again = run_overid_test(model, data, fit, M=2000, seed=1)
    assert again.to_json() == out.to_json()


def test_null_size_roughly_nominal():
    """Under correct specification the rejection rate does not exceed the nominal level much."""
    model = make_mean_overid_model(10)
    s = math.sqrt(math.log(11) / 200)
    pvals = []
    for b in range(40):
        data = gen_overid_mean(200, 10, case=1, seed=100 + b)
        fit = fit_penalized_el(model, data, 0.5 * s, 0.5 * s)
        pvals.append(run_overid_test(model, data, fit, mode="all", M=1000, seed=b).p_value)
    pvals = np.array(pvals)
    assert np.all((pvals >= 0) & (pvals <= 1))
    # 40 replicates at alpha = 0.05: 6 or more rejections has probability < 0.05
    assert np.sum(pvals <= 0.05) <= 5
