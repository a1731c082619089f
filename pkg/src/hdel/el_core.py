"""Empirical likelihood ratios through the concave dual in the multiplier.

For a moment matrix ``G`` (row ``i`` is ``g_i``) the log EL ratio is
``2 * max_lambda sum_i log(1 + lambda^T g_i)``.  The logarithm is replaced by
Owen's pseudo-logarithm below ``1/n`` so the dual is finite and concave on all
of ``R^q``; a solution is flagged ``inside`` when every ``1 + lambda^T g_i``
stays above that threshold, in which case it coincides with the exact EL
value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "DegenerateMomentError",
    "LambdaSolution",
    "log_star",
    "solve_lambda",
    "el_ratio",
    "marginal_el_ratio",
    "marginal_el_ratios",
    "chi2_quantile",
    "normal_quantile",
]


class DegenerateMomentError(ValueError):
    """A moment column without variation, or a rank-deficient moment matrix."""


def log_star(z, eps: float):
    """Pseudo-logarithm and its first two derivatives.

    ``log`` above ``eps``; below it, the quadratic that matches ``log`` to
    second order at ``eps``.
    """
    z = np.asarray(z, dtype=float)
    low = z < eps
    safe = np.where(low, eps, z)
    val = np.log(safe)
    d1 = 1.0 / safe
    d2 = -d1 * d1
    if np.any(low):
        t = z / eps
        val = np.where(low, math.log(eps) - 1.5 + 2.0 * t - 0.5 * t * t, val)
        d1 = np.where(low, (2.0 - t) / eps, d1)
        d2 = np.where(low, -1.0 / eps**2, d2)
    return val, d1, d2


@dataclass
class LambdaSolution:
    lam: np.ndarray
    log_el_ratio: float
    iterations: int
    converged: bool
    gradient_norm: float
    inside: bool

    def weights(self, G) -> np.ndarray:
        """Implied EL probabilities ``n^{-1} (1 + lambda^T g_i)^{-1}``."""
        G = np.asarray(G, dtype=float)
        return 1.0 / (G.shape[0] * (1.0 + G @ self.lam))


def check_moment_matrix(G) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if G.ndim != 2 or G.shape[0] < 2:
        raise DegenerateMomentError("moment matrix needs n >= 2 rows")
    if not np.all(np.isfinite(G)):
        raise DegenerateMomentError("moment matrix has non-finite entries")
    return G


def _flat_columns(G) -> np.ndarray:
    spread = G.max(axis=0) - G.min(axis=0)
    scale = np.maximum(np.abs(G).max(axis=0), 1.0)
    return np.flatnonzero(spread <= 1e-12 * scale)


def solve_lambda(G, tol: float = 1e-8, max_iter: int = 100) -> LambdaSolution:
    """Maximize ``sum_i log*(1 + lambda^T g_i)`` by damped Newton with Armijo backtracking.

    Convergence means ``max_j |n^{-1} sum_i g_ij / (1 + lambda^T g_i)| <= tol``.
    Non-convergence is reported through ``converged=False``.
    """
    G = check_moment_matrix(G)
    n, q = G.shape
    flat = _flat_columns(G)
    if flat.size:
        raise DegenerateMomentError(f"moment columns {flat.tolist()} have zero variance")
    eps = 1.0 / n
    gram = G.T @ G / n
    if np.linalg.matrix_rank(gram) < q:
        raise DegenerateMomentError("moment matrix is rank deficient (singular dual Hessian)")

    lam = np.zeros(q)
    val, d1, d2 = log_star(1.0 + G @ lam, eps)
    obj = val.sum()
    grad = G.T @ d1 / n
    it = 0
    converged = np.abs(grad).max() <= tol
    while not converged and it < max_iter:
        it += 1
        hess = (G * (-d2)[:, None]).T @ G / n
        try:
            chol = np.linalg.cholesky(hess)
            step = np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
        except np.linalg.LinAlgError:
            step = grad.copy()
        slope = grad @ step
        if slope <= 0:
            step, slope = grad.copy(), grad @ grad
        t = 1.0
        while True:
            cand = lam + t * step
            cval = log_star(1.0 + G @ cand, eps)[0].sum()
            if cval >= obj + 1e-4 * t * n * slope or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12 and cval < obj:
            break
        lam = cand
        val, d1, d2 = log_star(1.0 + G @ lam, eps)
        obj = val.sum()
        grad = G.T @ d1 / n
        converged = np.abs(grad).max() <= tol
    gnorm = float(np.abs(grad).max())
    z = 1.0 + G @ lam
    return LambdaSolution(
        lam=lam,
        log_el_ratio=max(2.0 * float(obj), 0.0),
        iterations=it,
        converged=bool(converged),
        gradient_norm=gnorm,
        inside=bool(np.all(z >= eps)),
    )


def el_ratio(model, data, theta, tol: float = 1e-8, max_iter: int = 100) -> float:
    """``-2 log(n^n L(theta))`` for the full moment vector of ``model``."""
    theta = model.check_theta(theta)
    return solve_lambda(model.moments(data, theta), tol, max_iter).log_el_ratio


def marginal_el_ratios(G, tol: float = 1e-10, max_iter: int = 100, on_degenerate: str = "raise"):
    """Column-wise marginal EL ratios ``2 max_lambda sum_i log*(1 + lambda g_ij)``.

    All columns are solved at once with a vectorized safeguarded 1-d Newton
    iteration.  With ``on_degenerate="nan"`` zero-variance columns return NaN
    instead of raising.
    """
    G = check_moment_matrix(G)
    n, q = G.shape
    eps = 1.0 / n
    flat = _flat_columns(G)
    if flat.size and on_degenerate == "raise":
        raise DegenerateMomentError(f"moment columns {flat.tolist()} have zero variance")
    ok = np.ones(q, dtype=bool)
    ok[flat] = False
    lam = np.zeros(q)
    val, d1, d2 = log_star(1.0 + G * lam, eps)
    obj = val.sum(axis=0)
    grad = (G * d1).mean(axis=0)
    active = ok & (np.abs(grad) > tol)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        Ga = G[:, idx]
        curv = -(Ga * Ga * d2[:, idx]).mean(axis=0)
        step = grad[idx] / curv
        t = np.ones(idx.size)
        base = obj[idx]
        slope = grad[idx] * step
        cand = lam[idx] + step
        cval = log_star(1.0 + Ga * cand, eps)[0].sum(axis=0)
        bad = cval < base + 1e-4 * t * n * slope
        while bad.any():
            t[bad] *= 0.5
            cand[bad] = lam[idx][bad] + t[bad] * step[bad]
            cval[bad] = log_star(1.0 + Ga[:, bad] * cand[bad], eps)[0].sum(axis=0)
            bad = (cval < base + 1e-4 * t * n * slope) & (t > 1e-12)
        lam[idx] = cand
        v, g1, g2 = log_star(1.0 + Ga * cand, eps)
        obj[idx] = v.sum(axis=0)
        d1[:, idx], d2[:, idx] = g1, g2
        grad[idx] = (Ga * g1).mean(axis=0)
        active[idx] = (np.abs(grad[idx]) > tol) & (t > 1e-12)
    out = np.maximum(2.0 * obj, 0.0)
    out[~ok] = np.nan
    return out


def marginal_el_ratio(column, tol: float = 1e-10, max_iter: int = 100) -> float:
    col = np.asarray(column, dtype=float).reshape(-1, 1)
    return float(marginal_el_ratios(col, tol, max_iter)[0])


def normal_quantile(prob: float) -> float:
    """Inverse standard normal CDF: Acklam's rational approximation plus one Halley step."""
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {prob}")
    a = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
         1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
    b = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
         6.680131188771972e01, -1.328068155288572e01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
         -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00)
    lo = 0.02425
    if prob < lo:
        q = math.sqrt(-2 * math.log(prob))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    elif prob <= 1 - lo:
        q = prob - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log1p(-prob))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    if prob > 0.5:
        e = -(special.ndtr(-x) - (1 - prob))
    else:
        e = special.ndtr(x) - prob
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def chi2_quantile(df: float, prob: float) -> float:
    """Inverse chi-square CDF by Newton iteration on the regularized incomplete gamma."""
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {prob}")
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    k = df / 2.0
    z = normal_quantile(prob)
    h = 2.0 / (9.0 * df)
    x = df * max(1.0 - h + z * math.sqrt(h), 0.1) ** 3
    log_norm = special.gammaln(k) + k * math.log(2.0)
    for _ in range(200):
        if prob > 0.5:
            err = (1.0 - prob) - special.gammaincc(k, x / 2)
        else:
            err = special.gammainc(k, x / 2) - prob
        dens = math.exp((k - 1) * math.log(x) - x / 2 - log_norm)
        new = x - err / dens if dens > 0 else x / 2
        if not new > 0:
            new = x / 2
        if abs(new - x) <= 1e-14 * max(1.0, x):
            x = new
            break
        x = new
    return x
