"""Projected empirical likelihood inference for a few target coordinates.

The nuisance coordinates are held at a plug-in value ``theta*`` and the
moment vector is mapped through a projection matrix ``A`` whose rows are
nearly orthogonal to the nuisance gradient, leaving an ``m``-dimensional (or,
with sequential orthogonal rows, ``2m``-dimensional) estimating function for
the targets.  Its EL ratio is calibrated by ``chi^2_m`` for a fixed number of
targets or by ``m + z_{1-alpha} sqrt(2m)`` when ``m`` grows with ``n``.

When the projected system has more equations than targets, the region is
``{theta_M: ell*(theta_M) - min ell* <= threshold}``, the usual calibration
for over-identified EL.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize

from .el_core import DegenerateMomentError, chi2_quantile, normal_quantile, solve_lambda
from .projection import ProjectionMatrix, build_projection, default_tau, estimate_gradient

__all__ = [
    "ProjectedEL",
    "RegionSpec",
    "Interval",
    "ContourResult",
    "EmptyRegion",
    "UnboundedInterval",
    "build_projected_el",
    "projected_el_ratio",
    "region_spec",
    "region_contains",
    "confidence_interval",
    "region_contour",
    "linear_function_region",
]


class EmptyRegion(RuntimeError):
    def __init__(self, message: str, min_ratio: float):
        super().__init__(message)
        self.min_ratio = min_ratio


class UnboundedInterval(RuntimeError):
    pass


@dataclass(eq=False)
class ProjectedEL:
    """Projected EL for targets ``targets`` (0-based) with nuisance fixed at ``theta_star``."""

    model: object
    data: object
    A: np.ndarray
    theta_star: np.ndarray
    targets: tuple
    projection: Optional[ProjectionMatrix] = field(default=None, repr=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.theta_star = np.asarray(self.theta_star, dtype=float).reshape(-1)
        self.targets = tuple(int(k) for k in self.targets)
        if self.A.shape[1] != self.model.r:
            raise ValueError(f"A has {self.A.shape[1]} columns, model has r={self.model.r}")
        if self.theta_star.size != self.model.p:
            raise ValueError("theta_star must have length p")
        if not self.targets or len(set(self.targets)) != len(self.targets):
            raise ValueError("targets must be distinct and nonempty")
        if self.A.shape[0] < len(self.targets):
            raise ValueError("A needs at least one row per target")

    @property
    def m(self) -> int:
        return len(self.targets)

    @property
    def over_identified(self) -> bool:
        return self.A.shape[0] > self.m

    def full_theta(self, theta_m) -> np.ndarray:
        theta = self.theta_star.copy()
        theta[list(self.targets)] = np.asarray(theta_m, dtype=float).reshape(-1)
        return theta

    def moments(self, theta_m) -> np.ndarray:
        return self.model.moments(self.data, self.full_theta(theta_m)) @ self.A.T

    def ratio(self, theta_m) -> float:
        return solve_lambda(self.moments(theta_m)).log_el_ratio

    def standard_errors(self) -> np.ndarray:
        """Sandwich-type scale ``n^{-1/2} sd(f_k) / |slope_k|`` per target, at ``theta*``."""
        f = self.moments(self.theta_star[list(self.targets)])
        gam = self.model.mean_jacobian(self.data, self.theta_star)
        slope = self.A @ gam[:, list(self.targets)]
        out = np.empty(self.m)
        for k in range(self.m):
            row = k if not self.over_identified else int(np.argmax(np.abs(slope[:, k])))
            s = abs(slope[row, k])
            sd = f[:, row].std()
            out[k] = sd / (math.sqrt(self.data.n) * s) if s > 0 and sd > 0 else 1.0
        return out

    @cached_property
    def minimum(self):
        """``(theta_M_hat, min ell*)``: golden section for one target, BFGS otherwise."""
        start = self.theta_star[list(self.targets)]
        se = self.standard_errors()
        if self.m == 1:
            res = optimize.minimize_scalar(lambda t: self.ratio([t]), method="golden",
                                           bracket=(start[0] - se[0], start[0] + se[0]),
                                           options={"xtol": 1e-8})
            return np.array([res.x]), float(res.fun)
        res = optimize.minimize(lambda t: self.ratio(t), start, method="BFGS",
                                options={"gtol": 1e-8})
        return np.asarray(res.x), float(res.fun)


def build_projected_el(model, data, theta_star, targets: Sequence[int], tau: Optional[float] = None,
                       two_rows: bool = False, auto_relax: bool = False) -> ProjectedEL:
    """Estimate the gradient at ``theta_star``, solve the projection LPs and wrap the result."""
    theta_star = model.check_theta(theta_star)
    grad = estimate_gradient(model, data, theta_star)
    if tau is None:
        tau = default_tau(data.n, model.p)
    proj = build_projection(grad.gamma, targets, tau, two_rows=two_rows, auto_relax=auto_relax)
    return ProjectedEL(model, data, proj.A, theta_star, tuple(targets), projection=proj)


def projected_el_ratio(pel: ProjectedEL, theta_m) -> float:
    return pel.ratio(theta_m)


@dataclass(frozen=True)
class RegionSpec:
    alpha: float
    m: int
    calibration: str = "chi2"  # "chi2" (fixed m) or "normal" (diverging m)

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.calibration not in ("chi2", "normal"):
            raise ValueError(f"unknown calibration {self.calibration!r}")
        if self.m < 1:
            raise ValueError("m must be >= 1")

    @property
    def threshold(self) -> float:
        if self.calibration == "chi2":
            return chi2_quantile(self.m, 1 - self.alpha)
        return self.m + normal_quantile(1 - self.alpha) * math.sqrt(2 * self.m)


def region_spec(m: int, alpha: float = 0.05, calibration: str = "chi2") -> RegionSpec:
    return RegionSpec(alpha, m, calibration)


def _offset(pel: ProjectedEL) -> float:
    return pel.minimum[1] if pel.over_identified else 0.0


def region_contains(pel: ProjectedEL, theta_m, spec: RegionSpec) -> bool:
    return pel.ratio(theta_m) - _offset(pel) <= spec.threshold


@dataclass
class Interval:
    coord: int
    level: float
    lo: float
    hi: float
    center: float
    min_ratio: float
    threshold: float
    calibration: str
    lo_bounded: bool = True
    hi_bounded: bool = True
    evaluations: int = 0
    diagnostic: str = ""

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def to_dict(self) -> dict:
        return {"coord": self.coord, "level": self.level, "lo": self.lo, "hi": self.hi,
                "calibration": self.calibration, "center": self.center,
                "min_ratio": self.min_ratio, "threshold": self.threshold,
                "lo_bounded": self.lo_bounded, "hi_bounded": self.hi_bounded,
                "diagnostic": self.diagnostic}


def confidence_interval(pel: ProjectedEL, alpha: float = 0.05, calibration: str = "chi2",
                        xtol: float = 1e-6, expansions: int = 5) -> Interval:
    """Interval ``{t: ell*(t) - offset <= threshold}`` for a single target.

    The minimizer comes from golden-section search; each endpoint is bracketed by
    stepping ``10 * se`` away from it (doubling up to ``expansions`` times) and
    refined by Brent's bracketing root finder to ``xtol``.  A side that never
    crosses the threshold is reported as unbounded (endpoint ``+-inf``).  A projected
    moment without variation yields a NaN interval with a warning.
    """
    if pel.m != 1:
        raise ValueError("confidence_interval needs exactly one target coordinate")
    spec = RegionSpec(alpha, 1, calibration)
    coord = pel.targets[0]
    count = [0]

    def excess(t):
        count[0] += 1
        return pel.ratio([t]) - target

    try:
        center_v, min_ratio = pel.minimum
    except DegenerateMomentError as err:
        warnings.warn(f"degenerate projected moment for coordinate {coord}: {err}")
        return Interval(coord, 1 - alpha, math.nan, math.nan, math.nan, math.nan,
                        spec.threshold, calibration, False, False, 0, f"degenerate: {err}")
    center = float(center_v[0])
    target = spec.threshold + _offset(pel)
    if min_ratio > target:
        raise EmptyRegion(f"minimum ratio {min_ratio:.4g} exceeds threshold {target:.4g}", min_ratio)
    step = 10.0 * float(pel.standard_errors()[0])
    ends = []
    for sign in (-1.0, 1.0):
        width = step
        found = None
        for _ in range(expansions + 1):
            edge = center + sign * width
            if excess(edge) > 0:
                found = edge
                break
            width *= 2
        if found is None:
            ends.append((sign * math.inf, False))
            continue
        a, b = sorted((center, found))
        root = optimize.brentq(excess, a, b, xtol=xtol * 1e-2)
        ends.append((root, True))
    (lo, lo_ok), (hi, hi_ok) = ends
    diag = "" if lo_ok and hi_ok else "threshold not crossed within the bracket on an unbounded side"
    return Interval(coord, 1 - alpha, lo, hi, center, min_ratio, spec.threshold, calibration,
                    lo_ok, hi_ok, count[0], diag)


@dataclass
class ContourResult:
    points: np.ndarray  # boundary points, one row per point
    ratios: np.ndarray
    threshold: float
    evaluations: int
    inside: np.ndarray = field(repr=False, default=None)  # membership on the full grid
    min_ratio: float = math.nan

    def to_csv(self, path, names: Optional[Sequence[str]] = None) -> None:
        names = list(names) if names else [f"theta{k + 1}" for k in range(self.points.shape[1])]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names + ["ratio"])
            for pt, val in zip(self.points, self.ratios):
                writer.writerow([repr(float(v)) for v in pt] + [repr(float(val))])


def region_contour(pel: ProjectedEL, alpha: float, axes: Sequence, calibration: str = "chi2") -> ContourResult:
    """Boundary cells of the region on the product grid ``axes`` (one 1-d array per target).

    A grid point is on the boundary when it is inside the region and one of its
    axis neighbours is not.  Each grid point is evaluated exactly once.
    """
    if pel.m not in (2, 3) or len(axes) != pel.m:
        raise ValueError("region_contour needs 2 or 3 targets and one axis per target")
    axes = [np.asarray(a, dtype=float) for a in axes]
    spec = RegionSpec(alpha, pel.m, calibration)
    shape = tuple(a.size for a in axes)
    ratio = np.empty(shape)
    for idx in np.ndindex(shape):
        point = [axes[d][i] for d, i in enumerate(idx)]
        try:
            ratio[idx] = pel.ratio(point)
        except DegenerateMomentError:
            ratio[idx] = math.inf
    level = ratio - _offset(pel)
    inside = level <= spec.threshold
    if not inside.any():
        raise EmptyRegion(f"no grid point inside the region; smallest ratio {np.min(ratio):.4g}",
                          float(np.min(ratio)))
    boundary = np.zeros(shape, dtype=bool)
    for d in range(pel.m):
        for shift in (1, -1):
            nb = np.roll(inside, shift, axis=d)
            edge = [slice(None)] * pel.m
            edge[d] = 0 if shift == 1 else -1
            nb[tuple(edge)] = False  # outside the grid counts as outside the region
            boundary |= inside & ~nb
    idx = np.argwhere(boundary)
    pts = np.column_stack([axes[d][idx[:, d]] for d in range(pel.m)])
    return ContourResult(pts, ratio[boundary], spec.threshold, int(np.prod(shape)), inside,
                         float(np.min(ratio)))


def linear_function_region(pel: ProjectedEL, L, v, alpha: float = 0.05):
    """Is ``v`` in the region for ``L theta_M``?  Returns ``(contained, profile, theta_M_at_min)``.

    The profile ``min{ell*(theta_M): L theta_M = v}`` is computed on the affine slice
    ``theta_M = L^+ v + N z`` (``N`` a null-space basis of ``L``) by BFGS started from the
    projection of the unconstrained minimizer, and compared with ``chi^2_{q,1-alpha}``.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    v = np.asarray(v, dtype=float).reshape(-1)
    q, m = L.shape
    if m != pel.m or v.size != q:
        raise ValueError("L must be q x m and v of length q")
    if q > m or np.linalg.matrix_rank(L) < q:
        raise ValueError("L must have full row rank q <= m")
    base = np.linalg.pinv(L) @ v
    N = linalg.null_space(L)
    if N.shape[1] == 0:
        best, profile = base, pel.ratio(base)
    else:
        start = N.T @ (pel.minimum[0] - base)
        res = optimize.minimize(lambda z: pel.ratio(base + N @ z), start, method="BFGS",
                                options={"gtol": 1e-9})
        best, profile = base + N @ res.x, float(res.fun)
    threshold = chi2_quantile(q, 1 - alpha)
    return profile - _offset(pel) <= threshold, profile, best
