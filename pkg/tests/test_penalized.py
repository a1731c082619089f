import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hdel.el_core import solve_lambda
from hdel.moments import Dataset, FunctionModel, gen_linear, make_linear_model, make_mean_overid_model, gen_overid_mean
from hdel.penalized import (
    PELFit,
    PenaltySpec,
    bias_correct,
    default_grids,
    ebic_select,
    fit_penalized_el,
    inner_penalized_dual,
    penalty_value_deriv,
)


def dual_objective(G, lam, nu):
    z = 1 + G @ lam
    if np.any(z <= 1.0 / len(G)):
        return -np.inf
    return np.mean(np.log(z)) - nu * np.abs(lam).sum()


def test_penalty_values_and_derivatives():
    scad = PenaltySpec("scad", 0.5)
    assert penalty_value_deriv(scad, 1e-12)[1] == pytest.approx(0.5)
    assert penalty_value_deriv(scad, 0.5 * 3.7)[1] == 0.0
    assert penalty_value_deriv(scad, 10.0)[1] == 0.0
    assert penalty_value_deriv(PenaltySpec("l1", 0.3), 2.0)[0] == pytest.approx(0.6)
    # value is the integral of the derivative
    t = np.linspace(0, 3, 30001)
    integral = np.concatenate([[0], np.cumsum((scad.deriv(t[1:]) + scad.deriv(t[:-1])) / 2 * np.diff(t))])
    assert np.allclose(scad.value(t), integral, atol=1e-8)
    assert scad.rho_prime_zero == 1.0 and PenaltySpec("l1", 7.0).rho_prime_zero == 1.0
    with pytest.raises(ValueError):
        PenaltySpec("mcp", 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 5), st.floats(0, 20), st.floats(0, 20))
def test_penalty_class_properties(tau, t1, t2):
    spec = PenaltySpec("scad", tau)
    lo, hi = sorted((t1, t2))
    assert spec.value(hi) >= spec.value(lo) - 1e-12  # nondecreasing
    assert spec.deriv(hi) <= spec.deriv(lo) + 1e-12  # concave on [0, inf)
    assert spec.deriv(1e-12 * tau) / tau == pytest.approx(1.0)  # rho'(0+) free of tau


def test_inner_large_nu_gives_zero():
    G = np.random.default_rng(0).standard_normal((30, 4)) + 0.1
    nu = np.abs(G.mean(axis=0)).max() * 1.01
    sol = inner_penalized_dual(G, PenaltySpec("l1", nu))
    assert np.all(sol.lam == 0) and sol.support.size == 0


def test_inner_nu_zero_reduces_to_solve_lambda():
    G = np.random.default_rng(1).standard_normal((30, 3)) + 0.2
    a = inner_penalized_dual(G, PenaltySpec("l1", 0.0))
    b = solve_lambda(G)
    assert np.allclose(a.lam, b.lam, atol=1e-10)
    assert inner_penalized_dual(G, None).lam == pytest.approx(b.lam, abs=1e-10)


def test_inner_strong_and_null_moment_against_grid():
    rng = np.random.default_rng(2)
    n = 200
    G = np.column_stack([rng.standard_normal(n) + 0.6, rng.standard_normal(n)])
    G[:, 1] -= G[:, 1].mean()
    nu = 0.1
    sol = inner_penalized_dual(G, PenaltySpec("l1", nu))
    assert list(sol.support) == [0]
    grid = np.linspace(-1.5, 1.5, 601)
    vals = np.array([[dual_objective(G, np.array([a, b]), nu) for b in grid] for a in grid])
    i, j = np.unravel_index(np.argmax(vals), vals.shape)
    # refine around the grid maximum
    fine_a = np.linspace(grid[i] - 0.01, grid[i] + 0.01, 201)
    fine_b = np.linspace(grid[j] - 0.01, grid[j] + 0.01, 201)
    fine = np.array([[dual_objective(G, np.array([a, b]), nu) for b in fine_b] for a in fine_a])
    k, l = np.unravel_index(np.argmax(fine), fine.shape)
    assert sol.lam[0] == pytest.approx(fine_a[k], abs=1e-4)
    assert sol.lam[1] == pytest.approx(fine_b[l], abs=1e-4)
    assert sol.objective == pytest.approx(fine.max(), abs=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 0.3))
def test_inner_l1_kkt(seed, nu):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((40, 6)) + rng.normal(0, 0.3, 6)
    sol = inner_penalized_dual(G, PenaltySpec("l1", nu))
    score = G.T @ (1.0 / (1 + G @ sol.lam)) / len(G)
    zero = sol.lam == 0
    assert np.all(np.abs(score[zero]) <= nu + 1e-8)
    assert np.allclose(score[~zero], nu * np.sign(sol.lam[~zero]), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_inner_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((40, 5)) + rng.normal(0, 0.3, 5)
    perm = rng.permutation(5)
    a = inner_penalized_dual(G, PenaltySpec("l1", 0.05))
    b = inner_penalized_dual(G[:, perm], PenaltySpec("l1", 0.05))
    assert np.allclose(a.lam[perm], b.lam, atol=1e-7)
    assert set(perm[b.support]) == set(a.support)


def test_inner_scad_improves_on_l1_solution():
    G = np.random.default_rng(3).standard_normal((60, 4)) + np.array([0.8, 0.0, 0.3, 0.0])
    pen = PenaltySpec("scad", 0.05)
    sol = inner_penalized_dual(G, pen)
    l1 = inner_penalized_dual(G, PenaltySpec("l1", 0.05))
    scad_obj_at_l1 = dual_objective(G, l1.lam, 0) - pen.value(l1.lam).sum()
    assert sol.objective >= scad_obj_at_l1 - 1e-10
    assert sol.converged


def test_fit_full_shrinkage_on_null_model():
    rng = np.random.default_rng(4)
    model = make_linear_model(3)
    y = rng.standard_normal(40)
    data = Dataset.flat(np.column_stack([y, rng.standard_normal((40, 3))]))
    fit = fit_penalized_el(model, data, pi=50.0, nu=50.0)
    assert np.all(fit.theta == 0) and np.all(fit.lam == 0)
    assert fit.support == () and fit.moment_support == ()


def test_fit_strong_signal_matches_unpenalized_el_grid():
    rng = np.random.default_rng(5)
    n = 200
    w = rng.standard_normal((n, 2))
    y = w @ np.array([2.0, -1.5]) + rng.standard_normal(n)
    data = Dataset.flat(np.column_stack([y, w]))
    model = make_linear_model(2)
    fit = fit_penalized_el(model, data, pi=0.01, nu=0.01)
    # oracle: minimize the unpenalized two-moment EL ratio on a dense grid
    ols = np.linalg.lstsq(w, y, rcond=None)[0]
    grid = [np.linspace(c - 0.3, c + 0.3, 121) for c in ols]
    best = min(((solve_lambda(model.moments(data, [a, b])).log_el_ratio, a, b)
                for a in grid[0] for b in grid[1]))
    se = np.sqrt(np.diag(np.linalg.inv(w.T @ w)))
    assert np.all(np.abs(fit.theta - [2.0, -1.5]) <= 3 * se)
    assert np.all(np.abs(fit.theta - best[1:]) <= 0.02)


def test_fit_outer_objective_is_monotone_and_snapped():
    data, _ = gen_linear(60, 15, 6)
    fit = fit_penalized_el(make_linear_model(15), data, 0.1, 0.1)
    assert all(b <= a + 1e-10 * max(1, abs(a)) for a, b in zip(fit.trace, fit.trace[1:]))
    nz = fit.theta[fit.theta != 0]
    assert np.all(np.abs(nz) >= 1e-8)
    assert fit.inner_kkt <= 1e-6
    d = fit.to_dict()
    assert d["support"] == list(fit.support)


def test_fit_rejects_bad_tuning():
    data, _ = gen_linear(20, 10, 0)
    with pytest.raises(ValueError):
        fit_penalized_el(make_linear_model(10), data, 0.0, 0.1)


def test_lqa_keeps_zero_coordinates_at_zero():
    data, _ = gen_linear(60, 12, 7)
    model = make_linear_model(12)
    start = np.zeros(12)
    start[:3] = 1.0
    fit = fit_penalized_el(model, data, 0.05, 0.05, theta_init=start, outer="lqa")
    assert set(fit.support) <= {0, 1, 2}


def test_default_grids():
    pis, nus = default_grids(100, 40, 80)
    assert len(pis) == 8 and len(nus) == 8
    assert pis[0] == pytest.approx(0.1 * math.sqrt(math.log(40) / 100))
    assert nus[-1] == pytest.approx(2.0 * math.sqrt(math.log(80) / 100))


def test_ebic_single_point_and_grid_count():
    data, _ = gen_linear(40, 12, 8)
    model = make_linear_model(12)
    one = ebic_select(model, data, [0.2], [0.2])
    assert one.pi == 0.2 and one.nu == 0.2 and one.evaluated == 1
    grid = np.geomspace(0.05, 0.5, 5)
    res = ebic_select(model, data, grid, grid)
    assert res.evaluated == 25
    again = ebic_select(model, data, grid, grid)
    assert (again.pi, again.nu) == (res.pi, res.nu)
    assert again.fit.theta.tobytes() == res.fit.theta.tobytes()
    best = min(row["ebic"] for row in res.table)
    assert min(r["ebic"] for r in res.table if r["pi"] == res.pi and r["nu"] == res.nu) == best


def test_bias_correction_matches_direct_formula():
    rng = np.random.default_rng(9)
    model = make_mean_overid_model(1)  # two moments, one parameter
    x = rng.normal(5.0, 4.0, size=(80, 1))
    data = Dataset.flat(x)
    fit = fit_penalized_el(model, data, 0.01, 0.05)
    bc = bias_correct(fit, model, data)
    R, S = list(fit.moment_support), list(fit.support)
    assert R and S
    G = model.moments(data, fit.theta)[:, R]
    V = G.T @ G / len(G)
    gam = np.vstack([[-1.0], [-2 * fit.theta[0]]])[R][:, S]
    eta = 0.05 * np.sign(fit.lam[R])
    J = gam.T @ np.linalg.inv(V) @ gam
    psi = np.linalg.inv(J) @ gam.T @ np.linalg.inv(V) @ eta
    assert bc.applied
    assert np.allclose(bc.psi[S], psi, atol=1e-10)
    assert np.allclose(bc.theta, fit.theta - bc.psi)
    assert set(np.flatnonzero(bc.theta)) == set(S)


def _fake_fit(theta, lam, p2):
    return PELFit(theta=np.asarray(theta, float), lam=np.asarray(lam, float),
                  moment_support=tuple(np.flatnonzero(lam)), support=tuple(np.flatnonzero(theta)),
                  objective=0.0, trace=[], pi=0.1, nu=p2.tau, converged=True, iterations=1, p2=p2)


def test_bias_correction_vacuous_cases():
    data = Dataset.flat(np.random.default_rng(10).normal(5, 1, (30, 2)))
    model = make_mean_overid_model(2)
    zero = bias_correct(_fake_fit([5.0, 0.0], [0, 0, 0], PenaltySpec("l1", 0.1)), model, data)
    assert not zero.applied and np.all(zero.psi == 0)
    # SCAD lambda penalty with every |lam_j| beyond a * nu: eta = 0, so no correction
    flat = bias_correct(_fake_fit([5.0, 0.0], [1.0, 0, 0], PenaltySpec("scad", 0.1)), model, data)
    assert np.allclose(flat.psi, 0) and np.allclose(flat.theta, [5.0, 0.0])
