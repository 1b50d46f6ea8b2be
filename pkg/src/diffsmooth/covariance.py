"""Exponential covariance kernel and dense SPD linear algebra.

All matrices here are small enough (N in the hundreds) for dense O(N^3)
Cholesky factorizations; nothing is approximated.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import DomainError, NumericalError

JITTER_START = 1e-10
JITTER_MAX = 1e-6


class JitterWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ExponentialKernel:
    """K(s, s') = sigma2 * exp(-phi * ||s - s'||)."""

    sigma2: float
    phi: float
    name = "exponential"

    def __post_init__(self):
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise DomainError(f"sigma2 must be positive, got {self.sigma2}")
        if not (self.phi > 0 and math.isfinite(self.phi)):
            raise DomainError(f"phi must be positive, got {self.phi}")

    def __call__(self, dist):
        return kernel_eval(self, dist)

    def correlation(self, dist):
        return np.exp(-self.phi * np.asarray(dist, dtype=float))


def kernel_eval(k: ExponentialKernel, dist):
    """Covariance at distance ``dist`` (scalar or array)."""
    dist = np.asarray(dist, dtype=float)
    if np.any(dist < 0):
        raise DomainError("distances must be nonnegative")
    out = k.sigma2 * np.exp(-k.phi * dist)
    return float(out) if out.ndim == 0 else out


def corr_inversion_threshold(phi: float, rho: float) -> float:
    """Distance at which the exponential correlation falls to ``rho``."""
    if not 0.0 < rho < 1.0:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    if not phi > 0:
        raise DomainError(f"phi must be positive, got {phi}")
    return -math.log(rho) / phi


def _potrf(m: np.ndarray):
    chol, info = lapack.dpotrf(m, lower=1, clean=1, overwrite_a=0)
    return chol, info


class CovMatrix:
    """Symmetric covariance matrix with a cached lower Cholesky factor.

    Factorization first tries the matrix as is. On failure a diagonal jitter
    ``eps * scale`` is added with ``eps`` escalating from 1e-10 by decades up
    to 1e-6; ``scale`` is the mean diagonal (sigma2 for a kernel matrix).
    Pass ``allow_jitter=False`` to fail on the first attempt instead.
    """

    def __init__(self, m, *, copy=True, allow_jitter=True):
        m = np.array(m, dtype=float, copy=copy)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DomainError("covariance matrix must be square")
        m.setflags(write=False)
        self.m = m
        self._chol = None
        self.jitter = 0.0
        self.allow_jitter = allow_jitter

    @classmethod
    def from_kernel(cls, k: ExponentialKernel, d) -> "CovMatrix":
        return build_cov(k, d)

    @property
    def n(self) -> int:
        return self.m.shape[0]

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol = self._factor()
        return self._chol

    def _factor(self) -> np.ndarray:
        chol, info = _potrf(self.m)
        if info == 0:
            return chol
        first_info = info
        if not self.allow_jitter:
            raise NumericalError(f"matrix is not positive definite (leading minor {info})")
        scale = float(np.mean(np.diag(self.m))) if self.n else 1.0
        eps = JITTER_START
        while eps <= JITTER_MAX * (1 + 1e-9):
            jittered = self.m + eps * scale * np.eye(self.n)
            chol, info = _potrf(jittered)
            if info == 0:
                warnings.warn(
                    f"covariance not positive definite (leading minor {first_info}); "
                    f"added diagonal jitter {eps:g}*{scale:g}",
                    JitterWarning,
                    stacklevel=3,
                )
                self.jitter = eps * scale
                return chol
            eps *= 10.0
        raise NumericalError(
            f"Cholesky factorization failed at leading minor {info} "
            f"even with jitter {JITTER_MAX:g}"
        )

    def solve(self, b):
        return spd_solve(self, b)

    def logdet(self) -> float:
        return spd_logdet(self)

    def inverse(self) -> np.ndarray:
        inv, info = lapack.dpotri(self.chol, lower=1)
        if info != 0:
            raise NumericalError(f"dpotri failed with info={info}")
        inv = np.tril(inv) + np.tril(inv, -1).T
        return inv


def build_cov(k: ExponentialKernel, d) -> CovMatrix:
    d = np.atleast_2d(np.asarray(d, dtype=float))
    return CovMatrix(k.sigma2 * np.exp(-k.phi * d), copy=False)


def spd_solve(c: CovMatrix, b):
    """Solve ``c.m @ x = b`` through the cached factor."""
    L = c.chol
    z = solve_triangular(L, b, lower=True, check_finite=False)
    return solve_triangular(L, z, lower=True, trans="T", check_finite=False)


def spd_logdet(c: CovMatrix) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(c.chol))))


def chol_sample(c: CovMatrix, mean=None, z=None, rng=None):
    """Return ``mean + L z``; draws standard-normal ``z`` from ``rng`` if not given."""
    if z is None:
        if rng is None:
            raise ValueError("either z or rng is required")
        z = rng.standard_normal(c.n)
    out = c.chol @ np.asarray(z, dtype=float)
    if mean is not None:
        out = out + mean
    return out
