"""Doubly penalized empirical likelihood estimation.

The estimator minimizes over ``theta`` the profile

    F(theta) = max_lambda  n^{-1} sum_i log*(1 + lambda^T g_i(theta))
               + sum_k P1(|theta_k|) - sum_j P2(|lambda_j|)

(everything divided by ``n``).  The inner problem is solved exactly for an L1
``P2`` by an orthant-wise Newton method; a SCAD ``P2`` is handled by local linear
approximation (LLA) refits started from the L1 solution.  The outer problem takes
penalized Gauss-Newton steps (LLA by default, LQA optionally) with backtracking
on ``F``.
The support of the inner solution selects the moments ``R_n``; the
bias-corrected estimator removes the shrinkage the ``lambda`` penalty induces
on the selected parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .el_core import DegenerateMomentError, log_star, solve_lambda

__all__ = [
    "PenaltySpec",
    "InnerSolution",
    "PELFit",
    "BiasCorrectedFit",
    "EBICResult",
    "penalty_value_deriv",
    "inner_penalized_dual",
    "initial_estimate",
    "fit_penalized_el",
    "default_grids",
    "ebic_select",
    "bias_correct",
]


@dataclass(frozen=True)
class PenaltySpec:
    """A penalty ``P_tau(t)``: ``kind`` is ``"scad"`` or ``"l1"``; ``a`` is the SCAD shape."""

    kind: str
    tau: float
    a: float = 3.7

    def __post_init__(self):
        if self.kind not in ("scad", "l1"):
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.tau < 0:
            raise ValueError("tuning parameter must be non-negative")
        if self.kind == "scad" and self.a <= 2:
            raise ValueError("SCAD shape a must exceed 2")

    def value(self, t):
        t = np.abs(np.asarray(t, dtype=float))
        lam = self.tau
        if self.kind == "l1":
            return lam * t
        a = self.a
        mid = (2 * a * lam * t - t * t - lam * lam) / (2 * (a - 1))
        return np.where(t <= lam, lam * t, np.where(t <= a * lam, mid, (a + 1) * lam * lam / 2))

    def deriv(self, t):
        t = np.abs(np.asarray(t, dtype=float))
        lam = self.tau
        if self.kind == "l1":
            return np.full_like(t, lam)
        return np.where(t <= lam, lam, np.maximum(self.a * lam - t, 0.0) / (self.a - 1))

    @property
    def rho_prime_zero(self) -> float:
        """``rho'(0+)`` for ``rho(t) = P(t)/tau``; equals 1 for both kinds, whatever ``tau``."""
        return 1.0


def penalty_value_deriv(spec: PenaltySpec, t):
    return spec.value(t), spec.deriv(t)


@dataclass
class InnerSolution:
    lam: np.ndarray
    objective: float  # n^{-1} sum log*(1 + lam^T g_i) - sum P2(|lam_j|)
    support: np.ndarray
    hess: np.ndarray  # negative Hessian of the smooth part on the support (LQA weights included)
    weights: np.ndarray  # 1 / (1 + lam^T g_i) for the pseudo-log, i.e. log*'
    kkt: float
    iterations: int
    converged: bool


def _smooth(G, lam, eps):
    val, d1, d2 = log_star(1.0 + G @ lam, eps)
    return val.mean(), d1, d2


def _neg_hess(GA, d2):
    return (GA * (-d2)[:, None]).T @ GA / GA.shape[0]


def _pseudo_gradient(grad, x, w):
    """Minimum-norm subgradient of ``h(x) + sum_k w_k |x_k|`` given ``grad = h'(x)``."""
    pg = grad + w * np.sign(x)
    zero = x == 0
    gz = grad[zero]
    pg[zero] = np.sign(gz) * np.maximum(np.abs(gz) - w[zero], 0.0)
    return pg


def _owl_newton(fun, x0, w, tol=1e-9, max_iter=500):
    """Orthant-wise projected Newton for ``min_x h(x) + sum_k w_k |x_k|`` with ``h`` convex.

    ``fun(x)`` returns ``(h(x), h'(x), hess)`` where ``hess(W)`` gives the Hessian block on
    the index array ``W``.  The working set is the support plus every zero coordinate whose
    gradient exceeds its weight; trial points are projected onto the orthant of the current
    signs, so coordinates land on exact zeros.  Returns ``(x, h(x), kkt, iterations, state)``
    where ``state`` is whatever ``fun`` attached as a fourth element.
    """
    x = np.array(x0, dtype=float)
    w = np.asarray(w, dtype=float)
    h, grad, hess, state = fun(x)
    obj = h + w @ np.abs(x)
    pg = _pseudo_gradient(grad, x, w)
    it = 0
    while it < max_iter and np.abs(pg).max(initial=0.0) > tol:
        it += 1
        W = np.flatnonzero((x != 0) | (pg != 0))
        orth = np.where(x != 0, np.sign(x), -np.sign(pg))
        H = hess(W)
        H[np.diag_indices_from(H)] += 1e-10 * max(1.0, np.trace(H) / W.size)
        try:
            dW = -np.linalg.solve(H, pg[W])
        except np.linalg.LinAlgError:
            dW = -pg[W]
        # coordinates leaving zero must move against their pseudo-gradient
        dW[(x[W] == 0) & (dW * pg[W] >= 0)] = 0.0
        if not np.any(dW):
            dW = -pg[W]
        d = np.zeros_like(x)
        d[W] = dW
        t = 1.0
        while True:
            cand = x + t * d
            cand[cand * orth < 0] = 0.0
            ch, cgrad, chess, cstate = fun(cand)
            cobj = ch + w @ np.abs(cand)
            if cobj <= obj + 1e-4 * min(pg @ (cand - x), 0.0) or t < 1e-14:
                break
            t *= 0.5
        if not np.isfinite(cobj) or cobj > obj:
            break
        stalled = obj - cobj <= 1e-16 * max(1.0, abs(obj)) and np.abs(cand - x).max() <= 1e-15
        x, obj, h, grad, hess, state = cand, cobj, ch, cgrad, chess, cstate
        pg = _pseudo_gradient(grad, x, w)
        if stalled:
            break
    return x, h, float(np.abs(pg).max(initial=0.0)), it, state


def _dual_oracle(G):
    """Negated mean pseudo-log dual as an :func:`_owl_newton` objective."""
    n = G.shape[0]
    eps = 1.0 / n

    def fun(lam):
        f, d1, d2 = _smooth(G, lam, eps)
        return -f, -(G.T @ d1) / n, (lambda W: _neg_hess(G[:, W], d2)), (d1, d2)

    return fun


def inner_penalized_dual(G, penalty: Optional[PenaltySpec], lam0=None, tol: float = 1e-9,
                         max_iter: int = 500, max_lla: int = 20) -> InnerSolution:
    """Maximize ``n^{-1} sum log*(1 + lam^T g_i) - sum_j P2(|lam_j|)`` over ``lam``.

    An L1 penalty gives a concave problem solved exactly by orthant-wise Newton.  A SCAD
    penalty starts from the L1 solution and refits weighted-L1 problems with weights
    ``P2'(|lam_j|)`` (local linear approximation) until the support and values settle;
    every refit increases the SCAD objective.  ``penalty=None`` or a zero tuning
    parameter gives the unpenalized dual.
    """
    G = np.asarray(G, dtype=float)
    n, r = G.shape
    if not np.all(np.isfinite(G)):
        raise DegenerateMomentError("moment matrix has non-finite entries")
    nu = 0.0 if penalty is None else penalty.tau
    if nu == 0.0:
        sol = solve_lambda(G, tol=tol, max_iter=max_iter)
        lam = sol.lam
        f, d1, d2 = _smooth(G, lam, 1.0 / n)
        support = np.flatnonzero(lam != 0)
        return InnerSolution(lam, f, support, _neg_hess(G[:, support], d2), d1,
                             sol.gradient_norm, sol.iterations, sol.converged)
    fun = _dual_oracle(G)
    lam = np.zeros(r)
    if lam0 is not None:
        # a warm start only helps when it beats lam = 0 (penalized objective 0)
        lam0 = np.array(lam0, dtype=float)
        start = -fun(lam0)[0] - (nu * np.abs(lam0).sum() if penalty.kind == "l1"
                                 else penalty.value(lam0).sum())
        if start > 0:
            lam = lam0
    if penalty.kind == "l1":
        lam, h, kkt, it, (d1, d2) = _owl_newton(fun, lam, np.full(r, nu), tol, max_iter)
        obj = -h - nu * np.abs(lam).sum()
    else:
        # always refit from the L1 solution at this G, so the result is a function of G alone
        lam, h, kkt, it, (d1, d2) = _owl_newton(fun, lam, np.full(r, nu), tol, max_iter)
        obj = -h - penalty.value(lam).sum()
        for _ in range(max_lla):
            new, h, kkt, k, (d1, d2) = _owl_newton(fun, lam, penalty.deriv(lam), tol, max_iter)
            it += k
            new_obj = -h - penalty.value(new).sum()
            if new_obj < obj:
                break
            settled = (np.abs(new - lam).max(initial=0.0) <= tol
                       and np.array_equal(new != 0, lam != 0))
            lam, obj = new, new_obj
            if settled:
                break
        f, d1, d2 = _smooth(G, lam, 1.0 / n)
        grad = G.T @ d1 / n
        kkt = float(np.abs(_pseudo_gradient(-grad, lam, penalty.deriv(lam))).max(initial=0.0))
    support = np.flatnonzero(lam != 0)
    return InnerSolution(lam, obj, support, _neg_hess(G[:, support], d2), d1, kkt, it,
                         kkt <= max(tol, 1e-6))


@dataclass
class PELFit:
    theta: np.ndarray
    lam: np.ndarray
    moment_support: tuple  # R_n
    support: tuple  # supp(theta)
    objective: float
    trace: list
    pi: float
    nu: float
    converged: bool
    iterations: int
    p1: PenaltySpec = field(repr=False, default=None)
    p2: PenaltySpec = field(repr=False, default=None)
    inner_kkt: float = 0.0

    def to_dict(self) -> dict:
        return {
            "theta": [float(v) for v in self.theta],
            "lambda": [float(v) for v in self.lam],
            "moment_support": [int(j) for j in self.moment_support],
            "support": [int(k) for k in self.support],
            "objective": float(self.objective),
            "pi": float(self.pi),
            "nu": float(self.nu),
            "p1": self.p1.kind if self.p1 else None,
            "p2": self.p2.kind if self.p2 else None,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "inner_kkt": float(self.inner_kkt),
        }


def initial_estimate(model, data, ridge: float = 0.1) -> np.ndarray:
    """One ridge-regularized Gauss-Newton step on ``|g_bar(theta)|_2^2`` from ``theta = 0``.

    The LQA iterations never move a coordinate that sits exactly at zero, so the
    outer loop needs a dense starting point.
    """
    theta = np.zeros(model.p)
    gbar = model.moments(data, theta).mean(axis=0)
    gam = model.mean_jacobian(data, theta)
    gtg = gam.T @ gam
    delta = ridge * max(np.trace(gtg) / model.p, 1e-12)
    return -np.linalg.solve(gtg + delta * np.eye(model.p), gam.T @ gbar)


def _weighted_l1_qp(Q, c, w, x0, tol=1e-12, max_iter=200):
    """``argmin_x 0.5 x^T Q x + c^T x + sum_k w_k |x_k|`` for positive definite ``Q``."""

    def fun(x):
        qx = Q @ x
        return 0.5 * x @ qx + c @ x, qx + c, (lambda W: Q[np.ix_(W, W)].copy()), None

    # with near-zero curvature the first trial steps can overflow; backtracking rejects them
    with np.errstate(over="ignore", invalid="ignore"):
        return _owl_newton(fun, x0, w, tol, max_iter)[0]


def fit_penalized_el(model, data, pi: float, nu: float, theta_init=None, p1: str = "scad",
                     p2: str = "l1", a: float = 3.7, tol: float = 1e-6, max_iter: int = 200,
                     zero_tol: float = 1e-8, lqa_floor: float = 1e-6, outer: str = "lla",
                     damping: float = 1e-3) -> PELFit:
    """Penalized EL estimate for tuning ``(pi, nu)``; ``p1``/``p2`` pick the penalty kinds.

    Each outer iteration builds the Gauss-Newton model ``Gamma_R^T H^{-1} Gamma_R`` of the
    profile objective and the envelope gradient ``Gamma_w^T lambda`` (``Gamma_w`` is the
    Jacobian weighted by ``1/(1 + lambda^T g_i)``), then takes a penalized step with
    backtracking so that the profile objective never increases.

    ``outer="lla"`` (default) linearizes the ``theta`` penalty and solves the resulting
    weighted-L1 quadratic problem by orthant-wise Newton, so coordinates reach exact zero
    and may re-enter.  ``outer="lqa"`` uses the quadratic approximation
    ``P'(|t|)/max(|t|, lqa_floor) t^2 / 2`` on the nonzero coordinates; coordinates at
    zero stay there.  Either way ``|theta_k| < zero_tol`` is snapped to zero.
    """
    if pi <= 0 or nu <= 0:
        raise ValueError("tuning parameters must be positive")
    if outer not in ("lla", "lqa"):
        raise ValueError(f"unknown outer step {outer!r}")
    pen1 = PenaltySpec(p1, pi, a)
    pen2 = PenaltySpec(p2, nu, a)
    if theta_init is None and p2 == "scad":
        # a folded-concave lambda penalty leaves lambda unpenalized in its flat tail, which
        # is ill-posed far from the solution; start from the convex-P2 fit instead
        theta_init = fit_penalized_el(model, data, pi, nu, None, p1, "l1", a, tol, max_iter,
                                      zero_tol, lqa_floor, outer, damping).theta
    if theta_init is None:
        theta = initial_estimate(model, data)
    else:
        theta = model.check_theta(theta_init).copy()
    theta[np.abs(theta) < zero_tol] = 0.0

    def profile(th, lam0):
        G = model.moments(data, th)
        inner = inner_penalized_dual(G, pen2, lam0)
        return inner.objective + pen1.value(th).sum(), inner

    F, inner = profile(theta, None)
    trace = [F]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        free = np.arange(model.p) if outer == "lla" else np.flatnonzero(theta != 0)
        if free.size == 0:
            converged = True
            break
        R = inner.support
        th_f = theta[free]
        if R.size:
            gam_w = model.mean_jacobian(data, theta, weights=inner.weights)[np.ix_(R, free)]
            grad = gam_w.T @ inner.lam[R]
            gam = model.mean_jacobian(data, theta)[np.ix_(R, free)]
            H = gam.T @ np.linalg.solve(inner.hess, gam)
        else:
            grad = np.zeros(free.size)
            H = np.zeros((free.size, free.size))
        mu = damping * max(np.trace(H) / free.size, 1e-8)
        if outer == "lla":
            Q = H + mu * np.eye(free.size)
            target = _weighted_l1_qp(Q, grad - Q @ th_f, pen1.deriv(th_f), th_f)
            step = target - th_f
        else:
            D = pen1.deriv(th_f) / np.maximum(np.abs(th_f), lqa_floor)
            M = H + np.diag(D) + mu * np.eye(free.size)
            step = np.linalg.solve(M, -(grad + D * th_f))
        if not np.any(step):
            converged = True
            break
        t = 1.0
        accepted = False
        while t >= 1e-6:
            cand = theta.copy()
            cand[free] = th_f + t * step
            cand[np.abs(cand) < zero_tol] = 0.0
            cF, cinner = profile(cand, inner.lam)
            if cF <= F + 1e-12 * max(1.0, abs(F)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # no descent along the model step: a (possibly nonsmooth) stationary point
            converged = bool(np.abs(step).max() <= 1e-4)
            break
        change = np.abs(cand - theta).max()
        theta, F, inner = cand, cF, cinner
        trace.append(F)
        if change < tol:
            converged = True
            break
    return PELFit(
        theta=theta,
        lam=inner.lam,
        moment_support=tuple(int(j) for j in inner.support),
        support=tuple(int(k) for k in np.flatnonzero(theta)),
        objective=F,
        trace=trace,
        pi=pi,
        nu=nu,
        converged=converged,
        iterations=it,
        p1=pen1,
        p2=pen2,
        inner_kkt=inner.kkt,
    )


def default_grids(n: int, p: int, r: int, size: int = 8):
    mult = np.geomspace(0.1, 2.0, size)
    return mult * math.sqrt(math.log(max(p, 2)) / n), mult * math.sqrt(math.log(max(r, 2)) / n)


@dataclass
class EBICResult:
    pi: float
    nu: float
    fit: PELFit
    table: list  # one dict per grid point
    gamma: float
    criterion: str = "selected"

    @property
    def evaluated(self) -> int:
        return len(self.table)


def _ebic_value(model, data, fit: PELFit, gamma: float, criterion: str = "selected") -> tuple:
    R = list(fit.moment_support) if criterion == "selected" else list(range(model.r))
    ell = 0.0
    if R:
        G = model.moments(data, fit.theta)[:, R]
        try:
            ell = solve_lambda(G).log_el_ratio
        except DegenerateMomentError:
            ell = math.inf
    n, p = data.n, model.p
    size = len(fit.support)
    return ell + size * (math.log(n) + 2 * gamma * math.log(p)), ell


def ebic_select(model, data, pi_grid: Optional[Sequence] = None, nu_grid: Optional[Sequence] = None,
                gamma: float = 0.5, theta_init=None, p1: str = "scad", p2: str = "l1",
                a: float = 3.7, executor=None, warm_start: bool = True, criterion: str = "selected",
                **fit_kw) -> EBICResult:
    """Grid search over ``(pi, nu)`` minimizing ``ell(theta_hat) + |S_hat| (log n + 2 gamma log p)``.

    ``ell`` is the unpenalized EL ratio at the fit using the selected moments ``R_n``
    (``criterion="selected"``) or all ``r`` moments (``criterion="all"``).  Ties go to the
    sparser fit, then the larger ``pi``, then the larger ``nu``.

    For each ``nu`` the ``pi`` values are visited from largest to smallest and, with
    ``warm_start``, each fit starts from the previous one (the first from ``theta_init``,
    by default the ridge start).  The ``nu`` paths are independent, so ``executor``
    (anything with a ``map`` method) may run them in parallel without changing the result.
    """
    if criterion not in ("selected", "all"):
        raise ValueError(f"unknown criterion {criterion!r}")
    dpi, dnu = default_grids(data.n, model.p, model.r)
    pi_grid = dpi if pi_grid is None else list(pi_grid)
    nu_grid = dnu if nu_grid is None else list(nu_grid)
    if len(pi_grid) == 0 or len(nu_grid) == 0:
        raise ValueError("tuning grids must be nonempty")
    pis = sorted({float(v) for v in pi_grid}, reverse=True)
    nus = sorted({float(v) for v in nu_grid}, reverse=True)

    def path(nu):
        out = []
        start = theta_init
        for pi in pis:
            try:
                fit = fit_penalized_el(model, data, pi, nu, theta_init=start, p1=p1, p2=p2, a=a,
                                       **fit_kw)
            except (DegenerateMomentError, np.linalg.LinAlgError, FloatingPointError) as err:
                out.append(((pi, nu), None, str(err)))
                continue
            out.append(((pi, nu), fit, None))
            if warm_start and np.any(fit.theta):
                start = fit.theta
        return out

    paths = list(executor.map(path, nus)) if executor is not None else [path(nu) for nu in nus]
    table = []
    best = None
    for (pi, nu), fit, err in (item for chunk in paths for item in chunk):
        if fit is None:
            table.append({"pi": pi, "nu": nu, "ebic": math.inf, "error": err})
            continue
        value, ell = _ebic_value(model, data, fit, gamma, criterion)
        table.append({"pi": pi, "nu": nu, "ebic": value, "ell": ell, "support_size": len(fit.support),
                      "moment_support_size": len(fit.moment_support), "converged": fit.converged})
        key = (value, len(fit.support), -pi, -nu)
        if math.isfinite(value) and (best is None or key < best[0]):
            best = (key, pi, nu, fit)
    if best is None:
        raise RuntimeError("no grid point produced a usable fit")
    _, pi, nu, fit = best
    return EBICResult(pi=pi, nu=nu, fit=fit, table=table, gamma=gamma, criterion=criterion)


@dataclass
class BiasCorrectedFit:
    theta: np.ndarray
    psi: np.ndarray
    V: Optional[np.ndarray]
    J: Optional[np.ndarray]
    eta: Optional[np.ndarray]
    applied: bool
    diagnostic: str = ""


def bias_correct(fit: PELFit, model, data, max_cond: float = 1e8) -> BiasCorrectedFit:
    """Remove the ``lambda``-penalty bias on the selected coordinates.

    ``psi = J^{-1} Gamma_{R,S}^T V_R^{-1} eta_R`` with ``J = Gamma_{R,S}^T V_R^{-1} Gamma_{R,S}``
    and ``eta_j = P2'(|lam_j|) sgn(lam_j)``; the result is ``theta - psi`` on ``S``.
    """
    theta = fit.theta
    R = list(fit.moment_support)
    S = list(fit.support)
    psi_full = np.zeros(model.p)

    def skip(msg, V=None, J=None, eta=None):
        return BiasCorrectedFit(theta.copy(), psi_full, V, J, eta, False, msg)

    if not R or not S:
        return skip("empty moment or parameter support; no correction")
    pen2 = fit.p2 if fit.p2 is not None else PenaltySpec("l1", fit.nu)
    lam_R = fit.lam[R]
    eta = pen2.deriv(lam_R) * np.sign(lam_R)
    G = model.moments(data, theta)[:, R]
    V = G.T @ G / data.n
    if np.linalg.cond(V) >= max_cond:
        return skip(f"V_R is ill-conditioned (cond={np.linalg.cond(V):.3g})", V=V, eta=eta)
    gam = model.mean_jacobian(data, theta)[np.ix_(R, S)]
    Vinv_gam = np.linalg.solve(V, gam)
    J = gam.T @ Vinv_gam
    if np.linalg.cond(J) >= max_cond:
        return skip(f"J_R is ill-conditioned (cond={np.linalg.cond(J):.3g})", V=V, J=J, eta=eta)
    psi = np.linalg.solve(J, Vinv_gam.T @ eta)
    psi_full[S] = psi
    return BiasCorrectedFit(theta - psi_full, psi_full, V, J, eta, True)
