"""Sparse projection of the moment vector away from the nuisance directions.

Each row ``a_k`` solves

    min |u|_1  subject to  |Gamma^T u - e_{M_k}|_inf <= tau,

where ``Gamma`` is the ``r x p`` mean Jacobian at an initial estimate.  Rows are
linear programs in the split variables ``u = u+ - u-`` and are handed to the
simplex solver in :mod:`hdel.lp`.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .lp import check_certificate, simplex

__all__ = [
    "GradientEstimate",
    "ProjectionRow",
    "ProjectionMatrix",
    "ProjectionInfeasible",
    "estimate_gradient",
    "default_tau",
    "min_feasible_tau",
    "solve_projection_row",
    "sequential_orthogonal_row",
    "build_projection",
]


class ProjectionInfeasible(RuntimeError):
    def __init__(self, k: int, tau: float, tau_min: float):
        self.k, self.tau, self.tau_min = k, tau, tau_min
        super().__init__(
            f"projection row for coordinate {k} is infeasible at tau={tau:.6g}; "
            f"smallest feasible tau is about {tau_min:.6g}"
        )


@dataclass
class GradientEstimate:
    gamma: np.ndarray
    theta: np.ndarray
    step: Optional[np.ndarray] = None  # finite-difference steps, None when analytic


def estimate_gradient(model, data, theta) -> GradientEstimate:
    """Mean Jacobian at ``theta``: analytic when the model supplies one, else central differences."""
    theta = model.check_theta(theta)
    gamma = np.asarray(model.mean_jacobian(data, theta), dtype=float)
    if gamma.shape != (model.r, model.p):
        raise ValueError(f"Jacobian has shape {gamma.shape}, expected {(model.r, model.p)}")
    if not np.all(np.isfinite(gamma)):
        raise FloatingPointError("non-finite Jacobian entries")
    step = None if model.has_jacobian else 1e-5 * np.maximum(1.0, np.abs(theta))
    return GradientEstimate(gamma=gamma, theta=theta.copy(), step=step)


def default_tau(n: int, p: int) -> float:
    return 0.5 * math.sqrt(math.log(p) / n) if p > 1 else 0.0


@dataclass
class ProjectionRow:
    a: np.ndarray
    k: int
    l1: float
    residual: float
    feasible: bool
    iterations: int
    certificate: dict = field(default_factory=dict)


def _row_lp(gamma, xi, tau, orth=None):
    r = gamma.shape[0]
    gt = gamma.T
    c = np.ones(2 * r)
    A_ub = np.vstack([np.hstack([gt, -gt]), np.hstack([-gt, gt])])
    b_ub = np.concatenate([tau + xi, tau - xi])
    A_eq = b_eq = None
    if orth is not None:
        orth = np.asarray(orth, dtype=float).reshape(1, -1)
        A_eq = np.hstack([orth, -orth])
        b_eq = np.zeros(1)
    return c, A_ub, b_ub, A_eq, b_eq


def min_feasible_tau(gamma, k: int, orth=None) -> float:
    """``min_u |Gamma^T u - e_k|_inf`` (optionally with ``orth^T u = 0``), by the same simplex."""
    gamma = np.asarray(gamma, dtype=float)
    r, p = gamma.shape
    xi = np.zeros(p)
    xi[k] = 1.0
    gt = gamma.T
    one = np.ones((p, 1))
    c = np.zeros(2 * r + 1)
    c[-1] = 1.0
    A_ub = np.vstack([np.hstack([gt, -gt, -one]), np.hstack([-gt, gt, -one])])
    b_ub = np.concatenate([xi, -xi])
    A_eq = b_eq = None
    if orth is not None:
        orth = np.asarray(orth, dtype=float)
        A_eq = np.concatenate([orth, -orth, [0.0]]).reshape(1, -1)
        b_eq = np.zeros(1)
    res = simplex(c, A_ub, b_ub, A_eq, b_eq)
    return float(res.fun) if res.success else float("inf")


def solve_projection_row(gamma, k: int, tau: float, orth=None, rule: str = "hybrid") -> ProjectionRow:
    """L1-minimal ``u`` with ``|Gamma^T u - e_k|_inf <= tau`` (and ``orth^T u = 0`` if given).

    ``k`` is a 0-based parameter index.  Raises :class:`ProjectionInfeasible`
    with the smallest feasible ``tau`` when the constraint set is empty.
    """
    gamma = np.asarray(gamma, dtype=float)
    r, p = gamma.shape
    if not 0 <= k < p:
        raise IndexError(f"target coordinate {k} outside 0..{p - 1}")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    xi = np.zeros(p)
    xi[k] = 1.0
    res = simplex(*_row_lp(gamma, xi, tau, orth), rule=rule)
    if res.status == "infeasible":
        raise ProjectionInfeasible(k, tau, min_feasible_tau(gamma, k, orth))
    if not res.success:
        raise RuntimeError(f"projection LP for coordinate {k} ended with status {res.status}")
    a = res.x[:r] - res.x[r:]
    resid = float(np.abs(gamma.T @ a - xi).max())
    return ProjectionRow(
        a=a,
        k=k,
        l1=float(np.abs(a).sum()),
        residual=resid,
        feasible=resid <= tau + 1e-8,
        iterations=res.iterations,
        certificate=check_certificate(res),
    )


def sequential_orthogonal_row(gamma, k: int, tau: float, a_first, rule: str = "hybrid") -> ProjectionRow:
    """A second projection row for coordinate ``k`` orthogonal to ``a_first``."""
    a_first = np.asarray(a_first, dtype=float)
    if not np.any(a_first):
        raise ValueError("a_first must be nonzero")
    return solve_projection_row(gamma, k, tau, orth=a_first, rule=rule)


@dataclass
class ProjectionMatrix:
    A: np.ndarray
    rows: list
    tau: float
    targets: tuple
    relaxations: int = 0

    @property
    def m(self) -> int:
        return len(self.targets)

    def diagnostics(self) -> dict:
        return {
            "tau": self.tau,
            "targets": list(self.targets),
            "relaxations": self.relaxations,
            "rows": [
                {"k": row.k, "l1": row.l1, "residual": row.residual, "feasible": row.feasible,
                 "iterations": row.iterations, "certificate_ok": row.certificate.get("ok")}
                for row in self.rows
            ],
        }

    def to_csv(self, path, sidecar: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "target"] + [f"g{j + 1}" for j in range(self.A.shape[1])])
            for i, row in enumerate(self.rows):
                writer.writerow([i, row.k] + [repr(float(v)) for v in self.A[i]])
        if sidecar:
            with open(str(path) + ".json", "w") as fh:
                json.dump(self.diagnostics(), fh, indent=2, sort_keys=True)


def build_projection(gamma, targets: Sequence[int], tau: float, two_rows: bool = False,
                     auto_relax: bool = False, rule: str = "hybrid") -> ProjectionMatrix:
    """Stack one projection row per target coordinate (0-based indices).

    With ``two_rows`` each target also gets a second row orthogonal to its
    first one, giving ``2m`` rows ordered ``(a_1, a_1', a_2, a_2', ...)``.
    With ``auto_relax`` an infeasible ``tau`` is multiplied by 1.5, at most
    four times, before giving up.
    """
    gamma = np.asarray(gamma, dtype=float)
    targets = tuple(int(k) for k in targets)
    if len(set(targets)) != len(targets):
        raise ValueError("target coordinates must be distinct")
    relax = 0
    while True:
        try:
            rows = []
            for k in targets:
                first = solve_projection_row(gamma, k, tau, rule=rule)
                rows.append(first)
                if two_rows:
                    rows.append(sequential_orthogonal_row(gamma, k, tau, first.a, rule=rule))
            break
        except ProjectionInfeasible:
            if not auto_relax or relax >= 4:
                raise
            tau *= 1.5
            relax += 1
    A = np.vstack([row.a for row in rows])
    return ProjectionMatrix(A=A, rows=rows, tau=tau, targets=targets, relaxations=relax)
