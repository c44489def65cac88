"""Multivariate Gaussian search distributions.

A search distribution is ``N(mean, sigma**2 * cov)``.  Everything here treats
``sigma**2 * cov`` as the full covariance: sampling, whitening, Mahalanobis
distances and the KL divergence all fold the step size in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "KL_BOUND_CONSTANT",
    "EigenCache",
    "GaussianParams",
    "decompose",
    "sample",
    "whiten",
    "mahalanobis",
    "kl_divergence",
    "kl_error_bound",
]

#: Constant of the ranking-error drift bound, 2 * sqrt(2 ln 2).
KL_BOUND_CONSTANT = 2.0 * math.sqrt(2.0 * math.log(2.0))

_KL_ZERO = 1e-14


class StaleCacheError(ValueError):
    """An eigendecomposition was used with a distribution it was not built for."""


@dataclass(frozen=True)
class EigenCache:
    """Eigendecomposition ``cov = basis @ diag(scales**2) @ basis.T``."""

    basis: np.ndarray
    scales: np.ndarray
    generation_stamp: int

    @property
    def condition(self) -> float:
        return float((self.scales.max() / self.scales.min()) ** 2)


@dataclass(frozen=True, eq=False)
class GaussianParams:
    """Search distribution parameters.

    Only the upper triangle of ``cov`` is read; the stored matrix is
    symmetrized from it on construction.  ``stamp`` identifies the update that
    produced this distribution and is checked against :class:`EigenCache`.
    """

    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    stamp: int = 0

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        n = mean.shape[0]
        if cov.shape != (n, n):
            raise ValueError(f"cov must have shape {(n, n)}, got {cov.shape}")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be finite and non-negative, got {self.sigma}")
        upper = np.triu(cov)
        cov = upper + np.triu(cov, 1).T
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "sigma", float(self.sigma))

    @classmethod
    def isotropic(cls, mean, sigma=1.0) -> GaussianParams:
        mean = np.asarray(mean, dtype=float)
        return cls(mean, sigma, np.eye(mean.shape[0]))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def eigen(self) -> EigenCache:
        return decompose(self)

    @property
    def full_cov(self) -> np.ndarray:
        return self.sigma**2 * self.cov

    def log_eigenvalues(self) -> np.ndarray:
        """Log-eigenvalues of the full covariance ``sigma**2 * cov``."""
        return 2.0 * (math.log(self.sigma) + np.log(self.eigen.scales))

    def inv_sqrt(self) -> np.ndarray:
        """``(sigma**2 cov)^{-1/2}`` as a symmetric matrix."""
        eig = self.eigen
        return (eig.basis / (self.sigma * eig.scales)) @ eig.basis.T

    def equals(self, other: GaussianParams) -> bool:
        return (
            self.sigma == other.sigma
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.cov, other.cov)
        )


def decompose(dist: GaussianParams) -> EigenCache:
    """Eigendecompose ``dist.cov``; raises ``np.linalg.LinAlgError`` unless PD."""
    if not np.all(np.isfinite(dist.cov)):
        raise np.linalg.LinAlgError("covariance has non-finite entries")
    evals, basis = np.linalg.eigh(dist.cov)
    if evals[0] <= 0:
        raise np.linalg.LinAlgError(
            f"covariance is not positive definite (smallest eigenvalue {evals[0]:.3e})"
        )
    return EigenCache(basis, np.sqrt(evals), dist.stamp)


def _check_cache(dist: GaussianParams, cache: EigenCache | None) -> EigenCache:
    if cache is None:
        return dist.eigen
    if cache.generation_stamp != dist.stamp or cache.basis.shape[0] != dist.dim:
        raise StaleCacheError(
            f"eigen cache stamp {cache.generation_stamp} does not match "
            f"distribution stamp {dist.stamp}"
        )
    return cache


def sample(
    dist: GaussianParams,
    count: int,
    rng: np.random.Generator,
    cache: EigenCache | None = None,
) -> np.ndarray:
    """Draw ``count`` points from ``N(mean, sigma**2 cov)`` as rows of an array."""
    if count < 1:
        raise ValueError("count must be >= 1")
    eig = _check_cache(dist, cache)
    z = rng.standard_normal((count, dist.dim))
    return dist.mean + dist.sigma * ((z * eig.scales) @ eig.basis.T)


def whiten(dist: GaussianParams, x, cache: EigenCache | None = None) -> np.ndarray:
    """Map points to ``(sigma**2 cov)^{-1/2} (x - mean)``.

    Accepts a single vector or a 2-D array with one point per row.
    """
    eig = _check_cache(dist, cache)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dist.dim:
        raise ValueError(f"expected points of dimension {dist.dim}, got {x.shape[-1]}")
    if dist.sigma == 0:
        raise ValueError("cannot whiten with sigma = 0")
    centered = x - dist.mean
    return ((centered @ eig.basis) / (dist.sigma * eig.scales)) @ eig.basis.T


def mahalanobis(dist: GaussianParams, x) -> np.ndarray:
    """Mahalanobis distance of points to ``dist.mean`` under ``sigma**2 cov``."""
    w = whiten(dist, x)
    return np.sqrt(np.sum(w * w, axis=-1))


def kl_divergence(q: GaussianParams, p: GaussianParams) -> float:
    """Closed-form ``KL(q || p)`` between two Gaussians.

    Full covariances ``sigma**2 cov`` are used for both arguments.  The
    log-determinant ratio is a sum of log-eigenvalue differences.
    """
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    if q.sigma == p.sigma and np.array_equal(q.mean, p.mean) and np.array_equal(q.cov, p.cov):
        return 0.0
    p_inv_sqrt = p.inv_sqrt()
    trace = float(np.trace(p_inv_sqrt @ q.full_cov @ p_inv_sqrt))
    delta = p_inv_sqrt @ (p.mean - q.mean)
    maha = float(delta @ delta)
    logdet = float(np.sum(q.log_eigenvalues()) - np.sum(p.log_eigenvalues()))
    kl = 0.5 * (trace + maha - q.dim - logdet)
    if kl < _KL_ZERO:
        return 0.0
    return kl


def kl_error_bound(kl: float) -> float:
    """Upper bound on the ranking-error change caused by a KL drift of ``kl``."""
    if kl < 0:
        raise ValueError("kl must be non-negative")
    return KL_BOUND_CONSTANT * math.sqrt(kl)
