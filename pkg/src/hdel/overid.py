"""Over-identification test based on the maximum of marginal EL ratios.

The statistic is ``T_n = max_{j in J} ell_j(theta_hat)``.  Its null law is
approximated by ``|G|_inf^2`` with ``G ~ N(0, W_hat)``, where ``W_hat`` accounts
for the estimation of the selected parameters through the moments ``R_n``.
Draws use the multiplier representation

    G = D^{-1/2} Q_hat (n^{-1/2} sum_i xi_i g_{i,I}(theta_hat)),  xi_i ~ N(0, 1),

which has covariance exactly ``W_hat = D^{-1/2} Q_hat V_I Q_hat^T D^{-1/2}`` and needs
no square root of ``V_I``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .el_core import marginal_el_ratios
from .penalized import bias_correct
from .rng import replicate_rng

__all__ = [
    "IndexSets",
    "WHat",
    "TestOutcome",
    "IllConditioned",
    "select_J",
    "make_index_sets",
    "build_w_hat",
    "test_statistic",
    "multiplier_draws",
    "critical_value",
    "run_overid_test",
]

DRAW_BLOCK = 1000


class IllConditioned(np.linalg.LinAlgError):
    def __init__(self, name: str, cond: float):
        super().__init__(f"{name} is singular or ill-conditioned (condition number {cond:.3g})")
        self.name, self.cond = name, cond


@dataclass(frozen=True)
class IndexSets:
    J: tuple
    R: tuple
    S: tuple
    r: int
    provenance: str = "custom"

    @property
    def I(self) -> tuple:  # noqa: E743 - the paper's name for R union J
        return tuple(sorted(set(self.J) | set(self.R)))

    @property
    def RJ(self) -> tuple:
        return tuple(j for j in self.R if j in set(self.J))

    @property
    def RJc(self) -> tuple:
        return tuple(j for j in self.R if j not in set(self.J))

    @property
    def RcJ(self) -> tuple:
        return tuple(j for j in self.J if j not in set(self.R))

    @property
    def Ic(self) -> tuple:
        inside = set(self.I)
        return tuple(j for j in range(self.r) if j not in inside)

    @property
    def J_order(self) -> tuple:
        """Order of the ``J`` coordinates in ``W_hat``: ``(R cap J, R^c cap J)``."""
        return self.RJ + self.RcJ

    @property
    def I_order(self) -> tuple:
        """Column order of ``Q_hat``: ``(R cap J, R cap J^c, R^c cap J)``."""
        return self.RJ + self.RJc + self.RcJ


def make_index_sets(J, R, S, r: int, provenance: str = "custom") -> IndexSets:
    J = tuple(sorted({int(j) for j in J}))
    R = tuple(sorted({int(j) for j in R}))
    S = tuple(sorted({int(k) for k in S}))
    if not J:
        raise ValueError("J must contain at least one moment index")
    bad = [j for j in J + R if not 0 <= j < r]
    if bad:
        raise IndexError(f"moment indices {bad} outside 0..{r - 1}")
    return IndexSets(J, R, S, r, provenance)


def _studentized_means(G) -> np.ndarray:
    mean = G.mean(axis=0)
    sd = np.sqrt((G * G).mean(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(sd > 0, np.abs(mean) / sd, 0.0)
    return out


def select_J(fit, mode: str = "Rn", model=None, data=None, theta=None,
             custom: Optional[Sequence[int]] = None, fallback: int = 10) -> IndexSets:
    """Choose the test set ``J``: ``"Rn"`` (selected moments), ``"all"`` or ``"custom"``.

    When ``R_n`` is empty in ``"Rn"`` mode, ``J`` falls back to the ``min(fallback, r)``
    moments with the largest studentized ``|g_bar_j(theta)|`` (ties to the lower index);
    this needs ``model``, ``data`` and ``theta``.
    """
    r = len(fit.lam)
    R, S = fit.moment_support, fit.support
    if mode == "all":
        return make_index_sets(range(r), R, S, r, "all")
    if mode == "custom":
        if custom is None:
            raise ValueError("custom mode needs an index list")
        return make_index_sets(custom, R, S, r, "custom")
    if mode != "Rn":
        raise ValueError(f"unknown J mode {mode!r}")
    if R:
        return make_index_sets(R, R, S, r, "Rn")
    if model is None or data is None:
        raise ValueError("empty R_n: the fallback needs model and data")
    theta = fit.theta if theta is None else theta
    score = _studentized_means(model.moments(data, theta))
    order = np.lexsort((np.arange(r), -score))
    return make_index_sets(order[: min(fallback, r)], R, S, r, "Rn-fallback")


@dataclass
class WHat:
    W: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    V_J: np.ndarray
    V_I: np.ndarray
    V_R: Optional[np.ndarray]
    J_star: Optional[np.ndarray]
    d_inv_sqrt: np.ndarray
    sets: IndexSets
    G_I: np.ndarray = field(repr=False)  # n x |I| moments in I_order, for multiplier draws
    dropped: list = field(default_factory=list)

    @property
    def J_order(self) -> tuple:
        return self.sets.J_order


def _check_cond(name, M, max_cond):
    cond = np.linalg.cond(M) if M.size else 1.0
    if not np.isfinite(cond) or cond >= max_cond:
        raise IllConditioned(name, float(cond))


def build_w_hat(model, data, theta, sets: IndexSets, max_cond: float = 1e8,
                drop_unidentified: bool = True) -> WHat:
    """Assemble ``B_hat``, ``Q_hat`` and ``W_hat`` at ``theta`` for the index sets ``sets``.

    With ``drop_unidentified`` the parameters in ``S`` whose gradient column over
    ``R_n`` is exactly zero are left out of ``J_star`` (they cannot be estimated
    from the selected moments and would make it singular); they are listed in
    ``WHat.dropped``.
    """
    theta = model.check_theta(theta)
    G = model.moments(data, theta)
    n = G.shape[0]
    RJ, RJc, RcJ = list(sets.RJ), list(sets.RJc), list(sets.RcJ)
    J_ord, I_ord, R = RJ + RcJ, RJ + RJc + RcJ, RJ + RJc
    S = list(sets.S)
    G_I = G[:, I_ord]
    V_I = G_I.T @ G_I / n
    G_J = G[:, J_ord]
    V_J = G_J.T @ G_J / n
    diag = np.diag(V_J)
    if np.any(diag <= 0):
        zero = [J_ord[k] for k in np.flatnonzero(diag <= 0)]
        raise IllConditioned(f"V_J (zero variance in moments {zero})", math.inf)
    d_inv_sqrt = 1.0 / np.sqrt(diag)
    V_R = J_star = None
    B = np.zeros((len(J_ord), len(R)))
    dropped = []
    if S and R:
        gam = model.mean_jacobian(data, theta)[:, S]
        if drop_unidentified:
            keep = np.any(gam[R] != 0, axis=0)
            dropped = [k for k, kept in zip(S, keep) if not kept]
            gam = gam[:, keep]
    if S and R and gam.shape[1]:
        V_R = G[:, R].T @ G[:, R] / n
        _check_cond("V_R", V_R, max_cond)
        VinvG = np.linalg.solve(V_R, gam[R])
        J_star = gam[R].T @ VinvG
        _check_cond("J_star", J_star, max_cond)
        B = gam[J_ord] @ np.linalg.solve(J_star, VinvG.T)
    a, b, c = len(RJ), len(RJc), len(RcJ)
    Q = np.zeros((a + c, a + b + c))
    Q[:a, :a] = np.eye(a) - B[:a, :a]
    Q[:a, a:a + b] = -B[:a, a:]
    Q[a:, :a] = -B[a:, :a]
    Q[a:, a:a + b] = -B[a:, a:]
    Q[a:, a + b:] = np.eye(c)
    left = d_inv_sqrt[:, None] * Q
    W = left @ V_I @ left.T
    W = (W + W.T) / 2
    return WHat(W, B, Q, V_J, V_I, V_R, J_star, d_inv_sqrt, sets, G_I, dropped)


def test_statistic(model, data, theta, J: Sequence[int]):
    """``T_n`` over ``J`` plus the per-moment ratios; zero-variance moments are skipped with a warning."""
    J = [int(j) for j in J]
    G = model.moments(data, np.asarray(theta, dtype=float))[:, J]
    ratios = marginal_el_ratios(G, on_degenerate="nan")
    bad = [J[k] for k in np.flatnonzero(np.isnan(ratios))]
    if bad:
        warnings.warn(f"moments {bad} have zero variance and are excluded from T_n")
    valid = ratios[~np.isnan(ratios)]
    if valid.size == 0:
        raise ValueError("every moment in J is degenerate")
    return float(valid.max()), dict(zip(J, ratios.tolist())), bad


def multiplier_draws(w: WHat, M: int, seed: int = 0) -> np.ndarray:
    """``M x |J|`` draws of ``N(0, W_hat)`` (columns in ``w.J_order``).

    Draws are generated in blocks of 1000 with block-specific seeds, so any
    parallel split over blocks reproduces the serial result.
    """
    n = w.G_I.shape[0]
    proj = (w.d_inv_sqrt[:, None] * w.Q).T  # |I| x |J|
    out = np.empty((M, proj.shape[1]))
    for block, start in enumerate(range(0, M, DRAW_BLOCK)):
        size = min(DRAW_BLOCK, M - start)
        xi = replicate_rng(seed, block, stream=7).standard_normal((size, n))
        out[start:start + size] = (xi @ w.G_I / math.sqrt(n)) @ proj
    return out


@dataclass
class CriticalValue:
    cv: float
    alpha: float
    M: int
    stats: np.ndarray = field(repr=False)  # sorted |G_b|_inf^2

    def p_value(self, T: float) -> float:
        return float(np.count_nonzero(self.stats >= T)) / self.M


def critical_value(w: WHat, alpha: float = 0.05, M: int = 10_000, seed: int = 0) -> CriticalValue:
    """Order statistic ``ceil(M (1 - alpha))`` of ``|G_b|_inf^2`` over ``M`` multiplier draws."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if M < 1:
        raise ValueError("M must be positive")
    stats = np.sort((multiplier_draws(w, M, seed) ** 2).max(axis=1))
    k = max(math.ceil(M * (1 - alpha) - 1e-9), 1)
    return CriticalValue(float(stats[k - 1]), alpha, M, stats)


@dataclass
class TestOutcome:
    T_n: float
    cv: float
    alpha: float
    p_value: float
    M: int
    J: tuple
    R_n: tuple
    reject: bool
    provenance: str
    ratios: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)
    theta: Optional[np.ndarray] = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        return {"T_n": self.T_n, "cv": self.cv, "alpha": self.alpha, "p_value": self.p_value,
                "M": self.M, "J": list(self.J), "R_n": list(self.R_n), "reject": self.reject,
                "J_mode": self.provenance, "excluded": list(self.excluded),
                "diagnostics": self.diagnostics}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def run_overid_test(model, data, fit, alpha: float = 0.05, mode: str = "Rn", M: int = 10_000,
                    seed: int = 0, custom: Optional[Sequence[int]] = None,
                    bias_corrected: bool = True, max_cond: float = 1e8) -> TestOutcome:
    """Full test: ``J`` selection, ``T_n``, ``W_hat``, simulated critical value and p-value."""
    diagnostics = {}
    theta = fit.theta
    if bias_corrected:
        bc = bias_correct(fit, model, data, max_cond=max_cond)
        theta = bc.theta
        diagnostics["bias_correction"] = "applied" if bc.applied else bc.diagnostic
    sets = select_J(fit, mode, model, data, theta, custom)
    T, ratios, bad = test_statistic(model, data, theta, sets.J)
    if bad:
        keep = [j for j in sets.J if j not in set(bad)]
        sets = make_index_sets(keep, sets.R, sets.S, sets.r, sets.provenance)
    w = build_w_hat(model, data, theta, sets, max_cond=max_cond)
    if w.dropped:
        diagnostics["unidentified_parameters"] = w.dropped
    crit = critical_value(w, alpha, M, seed)
    return TestOutcome(T_n=T, cv=crit.cv, alpha=alpha, p_value=crit.p_value(T), M=M,
                       J=sets.J, R_n=sets.R, reject=T > crit.cv, provenance=sets.provenance,
                       ratios=ratios, excluded=bad, theta=theta, diagnostics=diagnostics)
