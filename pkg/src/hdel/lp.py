"""Dense two-phase simplex with Bland's anti-cycling rule.

Solves ``min c^T x`` subject to ``A_ub x <= b_ub``, ``A_eq x = b_eq``, ``x >= 0``.
Pivoting is fully deterministic.  Under Bland's rule the entering column is
the lowest-indexed one with a negative reduced cost; the default hybrid rule
prices by steepest reduced cost and reverts to Bland's rule whenever progress
stalls on degenerate vertices.  Ratio-test ties always go to the
lowest-indexed basic variable.  After termination the basic solution and the
dual vector are recomputed from the final basis so callers can check
optimality certificates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = ["LPResult", "simplex", "check_certificate"]


@dataclass
class LPResult:
    status: str  # "optimal" | "infeasible" | "unbounded" | "iteration_limit"
    x: Optional[np.ndarray]
    fun: float
    iterations: int
    phase1_objective: float
    basis: np.ndarray = field(repr=False)
    duals: Optional[np.ndarray] = field(default=None, repr=False)
    reduced_costs: Optional[np.ndarray] = field(default=None, repr=False)
    # standard-form data kept for certificate checks
    A_std: Optional[np.ndarray] = field(default=None, repr=False)
    b_std: Optional[np.ndarray] = field(default=None, repr=False)
    c_std: Optional[np.ndarray] = field(default=None, repr=False)
    x_std: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def success(self) -> bool:
        return self.status == "optimal"


def _pivot(T, row, col):
    T[row] /= T[row, col]
    piv = T[row]
    colv = T[:, col].copy()
    colv[row] = 0.0
    T -= np.outer(colv, piv)


def _run(T, basis, cost, n_cols, tol, max_iter, rule, it0=0):
    """Simplex iterations on tableau ``T`` (last column = rhs) for ``min cost^T x``.

    ``rule="bland"`` prices with Bland's rule throughout.  ``rule="hybrid"``
    prices with the most negative reduced cost (lowest index on ties) and falls
    back to Bland's rule after a run of degenerate pivots, which keeps the
    finite-termination guarantee.
    """
    it = it0
    stalled = 0
    while True:
        y_row = cost[basis] @ T[:, :n_cols]
        reduced = cost[:n_cols] - y_row
        enter = np.flatnonzero(reduced < -tol)
        if enter.size == 0:
            return "optimal", it
        if it >= max_iter:
            return "iteration_limit", it
        if rule == "bland" or stalled >= _STALL_LIMIT:
            j = int(enter[0])
        else:
            j = int(enter[np.argmin(reduced[enter])])
        colj = T[:, j]
        pos = np.flatnonzero(colj > tol)
        if pos.size == 0:
            return "unbounded", it
        ratios = T[pos, -1] / colj[pos]
        best = ratios.min()
        ties = pos[ratios <= best + tol * max(1.0, abs(best))]
        row = int(ties[np.argmin(basis[ties])])
        stalled = stalled + 1 if best <= tol else 0
        _pivot(T, row, j)
        basis[row] = j
        it += 1


_STALL_LIMIT = 50


def simplex(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, tol: float = 1e-9,
            max_iter: int = 50_000, rule: str = "hybrid") -> LPResult:
    if rule not in ("bland", "hybrid"):
        raise ValueError(f"unknown pivot rule {rule!r}")
    c = np.asarray(c, dtype=float)
    nv = c.size
    A_ub = np.zeros((0, nv)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).reshape(-1)
    A_eq = np.zeros((0, nv)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).reshape(-1)
    mu, me = A_ub.shape[0], A_eq.shape[0]
    m = mu + me

    # standard form: [A_ub I; A_eq 0] [x; s] = b
    A = np.zeros((m, nv + mu))
    A[:mu, :nv] = A_ub
    A[:mu, nv:] = np.eye(mu)
    A[mu:, :nv] = A_eq
    b = np.concatenate([b_ub, b_eq])
    c_std = np.concatenate([c, np.zeros(mu)])
    flip = b < 0
    A[flip] *= -1
    b[flip] *= -1
    n_std = nv + mu

    # initial basis: slacks where possible, artificials elsewhere
    need_art = [i for i in range(m) if i >= mu or flip[i]]
    na = len(need_art)
    T = np.zeros((m, n_std + na + 1))
    T[:, :n_std] = A
    T[:, -1] = b
    basis = np.empty(m, dtype=int)
    for i in range(mu):
        basis[i] = nv + i
    for a, i in enumerate(need_art):
        T[i, n_std + a] = 1.0
        basis[i] = n_std + a

    it = 0
    phase1 = 0.0
    if na:
        cost1 = np.zeros(n_std + na)
        cost1[n_std:] = 1.0
        status, it = _run(T, basis, cost1, n_std + na, tol, max_iter, rule)
        phase1 = float(cost1[basis] @ T[:, -1])
        feas_tol = 1e-8 * max(1.0, np.abs(b).max(initial=0.0))
        if status == "iteration_limit":
            return LPResult("iteration_limit", None, np.nan, it, phase1, basis)
        if phase1 > feas_tol:
            return LPResult("infeasible", None, np.nan, it, phase1, basis)
        # drive remaining artificials out of the basis; drop redundant rows
        keep = np.ones(m, dtype=bool)
        for i in range(m):
            if basis[i] >= n_std:
                cand = np.flatnonzero(np.abs(T[i, :n_std]) > 1e-7)
                if cand.size:
                    _pivot(T, i, int(cand[0]))
                    basis[i] = int(cand[0])
                    it += 1
                else:
                    keep[i] = False
        T = np.delete(T, np.s_[n_std:n_std + na], axis=1)[keep]
        basis = basis[keep]
        A, b = A[keep], b[keep]

    status, it = _run(T, basis, c_std, n_std, tol, max_iter, rule, it)
    if status != "optimal":
        return LPResult(status, None, np.nan, it, phase1, basis)

    B = A[:, basis]
    xb = np.linalg.solve(B, b)
    x_std = np.zeros(n_std)
    x_std[basis] = np.maximum(xb, 0.0)
    duals = np.linalg.solve(B.T, c_std[basis])
    reduced = c_std - A.T @ duals
    return LPResult(
        status="optimal",
        x=x_std[:nv].copy(),
        fun=float(c @ x_std[:nv]),
        iterations=it,
        phase1_objective=phase1,
        basis=basis.copy(),
        duals=duals,
        reduced_costs=reduced,
        A_std=A,
        b_std=b,
        c_std=c_std,
        x_std=x_std,
    )


def check_certificate(res: LPResult, primal_tol: float = 1e-8, slack_tol: float = 1e-6) -> dict:
    """Primal feasibility, dual feasibility and complementary slackness of an optimal basis."""
    if not res.success:
        return {"ok": False, "reason": res.status}
    scale = max(1.0, np.abs(res.b_std).max(initial=0.0))
    primal = float(np.abs(res.A_std @ res.x_std - res.b_std).max(initial=0.0))
    dual = float(max(0.0, -res.reduced_costs.min(initial=0.0)))
    comp = float(np.abs(res.x_std * res.reduced_costs).max(initial=0.0))
    gap = abs(float(res.c_std @ res.x_std - res.b_std @ res.duals))
    ok = (primal <= primal_tol * scale and dual <= slack_tol and comp <= slack_tol
          and gap <= slack_tol * max(1.0, abs(res.fun)))
    return {"ok": bool(ok), "primal_residual": primal, "dual_infeasibility": dual,
            "complementarity": comp, "duality_gap": gap}
