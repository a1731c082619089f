import warnings

import numpy as np
import pytest
from scipy import optimize


def primal_el_ratio(g):
    """-2 log(n^n prod pi_i) maximized over the simplex subject to sum pi_i g_i = 0.

    Independent of the dual solver: SLSQP on log-weights, then a polish by
    projected Newton steps inside the constraint set.
    """
    g = np.asarray(g, dtype=float).reshape(len(g), -1)
    n = g.shape[0]

    def neg(u):
        return -np.sum(np.log(np.maximum(u, 1e-300)))

    cons = [{"type": "eq", "fun": lambda u: np.sum(u) - 1.0, "jac": lambda u: np.ones(n)},
            {"type": "eq", "fun": lambda u: g.T @ u, "jac": lambda u: g.T}]
    best = None
    rng = np.random.default_rng(0)
    for start in [np.full(n, 1.0 / n)] + [rng.dirichlet(np.ones(n)) for _ in range(4)]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize.minimize(neg, start, jac=lambda u: -1.0 / np.maximum(u, 1e-300),
                                    constraints=cons, bounds=[(1e-12, 1)] * n, method="SLSQP",
                                    options={"ftol": 1e-15, "maxiter": 1000})
        if res.success and (best is None or res.fun < best.fun):
            best = res
    return 2 * (best.fun - n * np.log(n)) if best is not None else np.inf


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
