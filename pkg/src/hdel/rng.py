"""Seed derivation and Gaussian sampling helpers.

Every stochastic routine takes either an integer seed or a
``numpy.random.Generator``.  Replicate ``b`` of a run seeded with ``master``
always draws from ``SeedSequence(master, spawn_key=(b,))`` so serial and
parallel execution give identical streams.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def replicate_rng(master_seed: int, b: int, stream: int = 0) -> np.random.Generator:
    """Generator for replicate ``b`` (and sub-stream ``stream``) of a run."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(b), int(stream)))
    return np.random.Generator(np.random.PCG64(ss))


def replicate_seed(master_seed: int, b: int) -> int:
    """A 63-bit integer seed derived from ``(master_seed, b)``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(b),))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def sym_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root of a covariance matrix; negative eigenvalues clip to 0."""
    cov = np.asarray(cov, dtype=float)
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def mvn(rng: np.random.Generator, mean, cov_root: np.ndarray, size: int) -> np.ndarray:
    """``size`` draws of N(mean, R R^T) given the symmetric root ``R``."""
    z = rng.standard_normal((size, cov_root.shape[0]))
    return np.asarray(mean, dtype=float) + z @ cov_root
