"""Estimating-function models and the synthetic designs used in the experiments.

An :class:`EstimatingModel` maps an observation and a parameter vector to an
``r``-vector of moment functions ``g(x; theta)`` with ``E g(X; theta_0) = 0``.
Solvers only ever call the batched methods :meth:`EstimatingModel.moments`
(an ``n x r`` matrix) and :meth:`EstimatingModel.mean_jacobian` (``r x p``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import make_rng, mvn, sym_sqrt

__all__ = [
    "Dataset",
    "TruthSpec",
    "EstimatingModel",
    "FunctionModel",
    "LinearModel",
    "IVModel",
    "QIFModel",
    "MeanOverIdModel",
    "make_linear_model",
    "make_iv_model",
    "make_qif_model",
    "make_mean_overid_model",
    "compound_symmetry",
    "ar1_correlation",
    "gen_linear",
    "gen_repeated",
    "gen_overid_mean",
    "EXAMPLE1_THETA",
]


class DataError(ValueError):
    """Malformed or inconsistent observations."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` observations, either flat rows or per-subject longitudinal blocks.

    Flat layout stores an ``n x d`` array in ``rows``.  Grouped layout stores
    responses ``y[i]`` (length ``m_i``) and covariates ``z[i]`` (``m_i x p``).
    """

    layout: str
    rows: Optional[np.ndarray] = None
    y: tuple = ()
    z: tuple = ()
    subject_ids: tuple = ()

    def __post_init__(self):
        if self.layout == "flat":
            rows = np.asarray(self.rows, dtype=float)
            if rows.ndim != 2:
                raise DataError("flat rows must form a 2-d array")
            if rows.shape[0] < 2:
                raise DataError(f"need at least 2 observations, got {rows.shape[0]}")
            rows.setflags(write=False)
            object.__setattr__(self, "rows", rows)
        elif self.layout == "grouped":
            if len(self.y) != len(self.z):
                raise DataError("y and z must have one block per subject")
            if len(self.y) < 2:
                raise DataError(f"need at least 2 subjects, got {len(self.y)}")
            ys, zs = [], []
            p = None
            for i, (yi, zi) in enumerate(zip(self.y, self.z)):
                yi = np.asarray(yi, dtype=float).reshape(-1)
                zi = np.asarray(zi, dtype=float)
                if zi.ndim != 2 or zi.shape[0] != yi.shape[0]:
                    raise DataError(f"subject {i}: z block must be m_i x p with m_i = len(y_i)")
                if p is None:
                    p = zi.shape[1]
                elif zi.shape[1] != p:
                    raise DataError(f"subject {i}: covariate width {zi.shape[1]} != {p}")
                yi.setflags(write=False)
                zi.setflags(write=False)
                ys.append(yi)
                zs.append(zi)
            object.__setattr__(self, "y", tuple(ys))
            object.__setattr__(self, "z", tuple(zs))
            if not self.subject_ids:
                object.__setattr__(self, "subject_ids", tuple(range(len(ys))))
        else:
            raise DataError(f"unknown layout {self.layout!r}")

    @classmethod
    def flat(cls, rows) -> "Dataset":
        return cls(layout="flat", rows=rows)

    @classmethod
    def grouped(cls, y: Sequence, z: Sequence, subject_ids: Sequence = ()) -> "Dataset":
        return cls(layout="grouped", y=tuple(y), z=tuple(z), subject_ids=tuple(subject_ids))

    @property
    def n(self) -> int:
        return self.rows.shape[0] if self.layout == "flat" else len(self.y)

    @property
    def block_sizes(self) -> tuple:
        if self.layout == "flat":
            return ()
        return tuple(len(yi) for yi in self.y)

    def observations(self):
        if self.layout == "flat":
            return list(self.rows)
        return list(zip(self.y, self.z))

    def stacked(self):
        """``(Y, Z)`` as ``(n, m)`` and ``(n, m, p)`` arrays when all ``m_i`` agree, else None."""
        if self.layout != "grouped" or len(set(self.block_sizes)) != 1:
            return None
        cache = self.__dict__.get("_stacked")
        if cache is None:
            cache = (np.stack(self.y), np.stack(self.z))
            self.__dict__["_stacked"] = cache
        return cache


@dataclass(frozen=True, eq=False)
class TruthSpec:
    theta0: np.ndarray
    support: tuple = field(init=False)

    def __post_init__(self):
        theta0 = np.asarray(self.theta0, dtype=float)
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "support", tuple(int(k) for k in np.flatnonzero(theta0)))

    @property
    def s(self) -> int:
        return len(self.support)


class EstimatingModel:
    """Base class for moment-function specifications.

    Subclasses implement :meth:`moment` for a single observation, and may
    override :meth:`moments`, :meth:`jacobian` and :meth:`mean_jacobian` with
    vectorized or analytic versions.  ``bounds`` is a ``(lower, upper)`` pair of
    length-``p`` arrays; the default domain is unbounded.
    """

    r: int
    p: int
    layout: str = "flat"
    bounds = None

    @property
    def has_jacobian(self) -> bool:
        return type(self).jacobian is not EstimatingModel.jacobian

    def moment(self, obs, theta) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, obs, theta) -> Optional[np.ndarray]:
        return None

    def moments(self, data: Dataset, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.array([self.moment(x, theta) for x in data.observations()], dtype=float)

    def mean_jacobian(self, data: Dataset, theta, weights=None) -> np.ndarray:
        """``n^{-1} sum_i w_i dg_i/dtheta`` as an ``r x p`` matrix (``w_i = 1`` by default)."""
        theta = np.asarray(theta, dtype=float)
        if self.has_jacobian:
            obs = data.observations()
            w = np.ones(len(obs)) if weights is None else np.asarray(weights, dtype=float)
            return sum(wi * self.jacobian(x, theta) for wi, x in zip(w, obs)) / len(obs)
        return numeric_mean_jacobian(self, data, theta, weights=weights)

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.p:
            raise ValueError(f"theta has length {theta.shape[0]}, model expects p={self.p}")
        if self.bounds is not None:
            lo, hi = self.bounds
            if np.any(theta < lo) or np.any(theta > hi):
                raise ValueError("theta lies outside the parameter domain")
        return theta

    def check_data(self, data: Dataset) -> None:
        if data.layout != self.layout:
            raise DataError(f"model expects {self.layout} data, got {data.layout}")


def numeric_mean_jacobian(model: EstimatingModel, data: Dataset, theta, rel_step: float = 1e-5,
                          weights=None):
    theta = np.asarray(theta, dtype=float)
    w = np.ones(data.n) if weights is None else np.asarray(weights, dtype=float)
    jac = np.empty((model.r, model.p))
    for l in range(model.p):
        h = rel_step * max(1.0, abs(theta[l]))
        up, dn = theta.copy(), theta.copy()
        up[l] += h
        dn[l] -= h
        diff = w @ (model.moments(data, up) - model.moments(data, dn)) / data.n
        jac[:, l] = diff / (2 * h)
    if not np.all(np.isfinite(jac)):
        raise FloatingPointError("non-finite moment evaluations near theta")
    return jac


class FunctionModel(EstimatingModel):
    """A model assembled from per-observation callables."""

    def __init__(self, r: int, p: int, moment_fn: Callable, jacobian_fn: Optional[Callable] = None,
                 layout: str = "flat", bounds=None):
        self.r, self.p, self.layout, self.bounds = int(r), int(p), layout, bounds
        self._moment_fn = moment_fn
        self._jacobian_fn = jacobian_fn

    @property
    def has_jacobian(self) -> bool:
        return self._jacobian_fn is not None

    def moment(self, obs, theta):
        return np.asarray(self._moment_fn(obs, np.asarray(theta, dtype=float)), dtype=float)

    def jacobian(self, obs, theta):
        if self._jacobian_fn is None:
            return None
        return np.asarray(self._jacobian_fn(obs, np.asarray(theta, dtype=float)), dtype=float)


class LinearModel(EstimatingModel):
    """``g(x; theta) = W (Y - W^T theta)`` with observation row ``(Y, W_1..W_p)``."""

    def __init__(self, p: int):
        if p < 1:
            raise ValueError("p must be >= 1")
        self.p = self.r = int(p)

    def _split(self, data: Dataset):
        rows = data.rows
        if rows.shape[1] != 1 + self.p:
            raise DataError(f"linear model expects rows of width {1 + self.p}, got {rows.shape[1]}")
        return rows[:, 0], rows[:, 1:]

    def moment(self, obs, theta):
        obs = np.asarray(obs, dtype=float)
        w = obs[1:]
        return w * (obs[0] - w @ theta)

    def jacobian(self, obs, theta):
        w = np.asarray(obs, dtype=float)[1:]
        return -np.outer(w, w)

    def moments(self, data, theta):
        y, w = self._split(data)
        return w * (y - w @ np.asarray(theta, dtype=float))[:, None]

    def mean_jacobian(self, data, theta, weights=None):
        _, w = self._split(data)
        wt = w if weights is None else w * np.asarray(weights, dtype=float)[:, None]
        return -(wt.T @ w) / w.shape[0]


class IVModel(EstimatingModel):
    """``g(x; theta) = Z (Y - W^T theta)`` with observation row ``(Y, W, Z)``."""

    def __init__(self, p: int, r: int):
        if not r >= p >= 1:
            raise ValueError("need r >= p >= 1")
        self.p, self.r = int(p), int(r)

    def _split(self, rows):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != 1 + self.p + self.r:
            raise DataError(f"IV model expects rows of width {1 + self.p + self.r}, got {rows.shape[1]}")
        return rows[:, 0], rows[:, 1:1 + self.p], rows[:, 1 + self.p:]

    def moment(self, obs, theta):
        y, w, z = self._split(obs)
        return (z * (y - w @ theta)[:, None])[0]

    def jacobian(self, obs, theta):
        _, w, z = self._split(obs)
        return -np.outer(z[0], w[0])

    def moments(self, data, theta):
        y, w, z = self._split(data.rows)
        return z * (y - w @ np.asarray(theta, dtype=float))[:, None]

    def mean_jacobian(self, data, theta, weights=None):
        _, w, z = self._split(data.rows)
        zt = z if weights is None else z * np.asarray(weights, dtype=float)[:, None]
        return -(zt.T @ w) / z.shape[0]


class QIFModel(EstimatingModel):
    """Quadratic-inference-function moments for repeated measurements.

    Block ``j`` is ``Z_i^T K_i^{-1/2} M_j K_i^{-1/2} (Y_i - Z_i theta)``.  ``K_i``
    is the identity unless ``variance_fn(y_i, z_i)`` returns its diagonal.
    """

    layout = "grouped"

    def __init__(self, p: int, basis: Sequence, variance_fn: Optional[Callable] = None):
        if p < 1:
            raise ValueError("p must be >= 1")
        basis = [np.asarray(b, dtype=float) for b in basis]
        if not basis:
            raise ValueError("need at least one basis matrix")
        m = basis[0].shape[0]
        for b in basis:
            if b.shape != (m, m):
                raise ValueError("basis matrices must be square and share one size")
        self.p = int(p)
        self.basis = np.stack(basis)
        self.kappa = len(basis)
        self.r = self.kappa * self.p
        self.variance_fn = variance_fn

    def _weights(self, yi, zi):
        m = len(yi)
        if m != self.basis.shape[1]:
            raise DataError(f"subject block size {m} != basis size {self.basis.shape[1]}")
        if self.variance_fn is None:
            return self.basis
        s = 1.0 / np.sqrt(np.asarray(self.variance_fn(yi, zi), dtype=float))
        return self.basis * np.outer(s, s)

    def moment(self, obs, theta):
        yi, zi = obs
        resid = yi - zi @ theta
        return np.concatenate([zi.T @ (w @ resid) for w in self._weights(yi, zi)])

    def jacobian(self, obs, theta):
        yi, zi = obs
        return np.vstack([-(zi.T @ w @ zi) for w in self._weights(yi, zi)])

    def moments(self, data, theta):
        self.check_data(data)
        stacked = data.stacked()
        if stacked is None or self.variance_fn is not None:
            return super().moments(data, theta)
        y, z = stacked
        if y.shape[1] != self.basis.shape[1]:
            raise DataError(f"subject block size {y.shape[1]} != basis size {self.basis.shape[1]}")
        resid = y - np.einsum("imp,p->im", z, np.asarray(theta, dtype=float))
        wres = np.einsum("jab,ib->ija", self.basis, resid)
        return np.einsum("iap,ija->ijp", z, wres).reshape(len(y), self.r)

    def mean_jacobian(self, data, theta, weights=None):
        self.check_data(data)
        stacked = data.stacked()
        if stacked is None or self.variance_fn is not None:
            return super().mean_jacobian(data, theta, weights)
        _, z = stacked
        if z.shape[1] != self.basis.shape[1]:
            raise DataError(f"subject block size {z.shape[1]} != basis size {self.basis.shape[1]}")
        zw = z if weights is None else z * np.asarray(weights, dtype=float)[:, None, None]
        jac = -np.einsum("iap,jab,ibq->jpq", zw, self.basis, z) / len(z)
        return jac.reshape(self.r, self.p)


class MeanOverIdModel(EstimatingModel):
    """Mean model ``X - theta`` plus the restriction ``X_1^2 - theta_1^2 - 25``."""

    def __init__(self, p: int, offset: float = 25.0):
        if p < 1:
            raise ValueError("p must be >= 1")
        self.p = int(p)
        self.r = self.p + 1
        self.offset = float(offset)

    def moment(self, obs, theta):
        x = np.asarray(obs, dtype=float)
        return np.append(x - theta, x[0] ** 2 - theta[0] ** 2 - self.offset)

    def jacobian(self, obs, theta):
        jac = np.zeros((self.r, self.p))
        jac[: self.p] = -np.eye(self.p)
        jac[self.p, 0] = -2 * theta[0]
        return jac

    def moments(self, data, theta):
        x = data.rows
        if x.shape[1] != self.p:
            raise DataError(f"mean model expects rows of width {self.p}, got {x.shape[1]}")
        theta = np.asarray(theta, dtype=float)
        extra = x[:, 0] ** 2 - theta[0] ** 2 - self.offset
        return np.column_stack([x - theta, extra])

    def mean_jacobian(self, data, theta, weights=None):
        scale = 1.0 if weights is None else float(np.mean(weights))
        return scale * self.jacobian(None, np.asarray(theta, dtype=float))


def make_linear_model(p: int) -> LinearModel:
    return LinearModel(p)


def make_iv_model(p: int, r: int) -> IVModel:
    return IVModel(p, r)


def make_qif_model(p: int, basis: Sequence, variance_fn: Optional[Callable] = None) -> QIFModel:
    return QIFModel(p, basis, variance_fn)


def make_mean_overid_model(p: int) -> MeanOverIdModel:
    return MeanOverIdModel(p)


def compound_symmetry(d: int, rho: float, diag: float = 1.0) -> np.ndarray:
    out = np.full((d, d), float(rho))
    np.fill_diagonal(out, diag)
    return out


def ar1_correlation(d: int, rho: float) -> np.ndarray:
    idx = np.arange(d)
    return float(rho) ** np.abs(idx[:, None] - idx[None, :])


EXAMPLE1_THETA = (1.5, 1.2, 1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3)
EXAMPLE2_THETA = (3.0, 1.5, 0.0, 0.0, 2.0)


def gen_linear(n: int, p: int, seed) -> tuple[Dataset, TruthSpec]:
    """Linear regression design with compound-symmetric (0.5) covariates."""
    if p < 10:
        raise ValueError("the linear design needs p >= 10")
    rng = make_rng(seed)
    theta0 = np.zeros(p)
    theta0[:10] = EXAMPLE1_THETA
    z = mvn(rng, np.zeros(p), sym_sqrt(compound_symmetry(p, 0.5)), n)
    eps = rng.standard_normal(n)
    y = z @ theta0 + eps
    return Dataset.flat(np.column_stack([y, z])), TruthSpec(theta0)


def gen_repeated(n: int, p: int, seed, m: int = 3) -> tuple[Dataset, TruthSpec]:
    """Repeated-measurements design: ``m`` visits, AR(0.3) covariates, CS(0.5) errors."""
    if p < 5:
        raise ValueError("the repeated-measurements design needs p >= 5")
    rng = make_rng(seed)
    theta0 = np.zeros(p)
    theta0[:5] = EXAMPLE2_THETA
    z = mvn(rng, np.zeros(p), sym_sqrt(ar1_correlation(p, 0.3)), n * m).reshape(n, m, p)
    eps = mvn(rng, np.zeros(m), sym_sqrt(compound_symmetry(m, 0.5)), n)
    y = z @ theta0 + eps
    return Dataset.grouped(list(y), list(z)), TruthSpec(theta0)


def overid_covariance(p: int, case: int, a: float = 1.0) -> np.ndarray:
    if case not in (1, 2):
        raise ValueError(f"case must be 1 or 2, got {case}")
    if case == 2 and not 0 < a < 1:
        raise ValueError(f"case 2 needs a in (0, 1), got {a}")
    cov = compound_symmetry(p, 0.3)
    cov[0, 0] = 25.0 if case == 1 else 25.0 * a
    return cov


def gen_overid_mean(n: int, p: int, case: int, a: float = 1.0, seed=0) -> Dataset:
    """Gaussian vector with mean ``(5, 0, ..., 0)``; case 2 shrinks ``var(X_1)`` by ``a``."""
    cov = overid_covariance(p, case, a)
    rng = make_rng(seed)
    mu = np.zeros(p)
    mu[0] = 5.0
    return Dataset.flat(mvn(rng, mu, sym_sqrt(cov), n))
