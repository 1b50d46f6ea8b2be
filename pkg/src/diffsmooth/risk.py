"""Spatial-outlier detection, risk weights and the smoothing matrix A.

``gamma`` may be ``math.inf``. Infinity is handled symbolically so that
records with positive weight get ``A_ii == 0.0`` exactly rather than a tiny
float.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .covariance import ExponentialKernel, corr_inversion_threshold
from .errors import DomainError, InsufficientDataError
from .geodata import nearest_neighbor_distances

DEFAULT_RHO = 0.20


@dataclass(frozen=True, eq=False)
class OutlierVerdict:
    at_risk: np.ndarray
    nn_distance: np.ndarray
    threshold_M: float

    @property
    def count(self) -> int:
        return int(self.at_risk.sum())

    @property
    def weights(self) -> np.ndarray:
        return self.at_risk.astype(float)

    def at_risk_index(self) -> np.ndarray:
        return np.flatnonzero(self.at_risk)


@dataclass(frozen=True, eq=False)
class RiskProfile:
    a: np.ndarray
    gamma: float
    A_diag: np.ndarray

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.A_diag == 1.0))

    @property
    def at_risk(self) -> np.ndarray:
        return self.a > 0


def _check_kernel(kernel):
    if kernel is not None and getattr(kernel, "name", None) != ExponentialKernel.name:
        raise DomainError("threshold inversion is only defined for the exponential kernel")


def detect_outliers_binary(d, phi_hat: float, rho: float = DEFAULT_RHO,
                           kernel=None) -> OutlierVerdict:
    """Flag records whose nearest neighbour is at least M = -log(rho)/phi_hat away."""
    _check_kernel(kernel)
    d = np.asarray(d, dtype=float)
    if d.shape[0] < 2:
        raise InsufficientDataError("outlier detection needs at least 2 records")
    M = corr_inversion_threshold(phi_hat, rho)
    nn = nearest_neighbor_distances(d)
    return OutlierVerdict(at_risk=nn >= M, nn_distance=nn, threshold_M=M)


def continuous_weights(d, phi_hat: float, kernel=None) -> np.ndarray:
    """a_i = 1 - exp(-phi_hat * nearest-neighbour distance)."""
    _check_kernel(kernel)
    if not phi_hat > 0:
        raise DomainError(f"phi_hat must be positive, got {phi_hat}")
    nn = nearest_neighbor_distances(np.asarray(d, dtype=float))
    return -np.expm1(-phi_hat * nn)


def alpha_for_gamma(gamma: float, sigma2: float, tau2: float) -> float:
    """Weight on the record's own residual in its smoothed effect's conditional mean."""
    if gamma < 0 or math.isnan(gamma):
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    if math.isinf(gamma):
        return 0.0
    shrunk = sigma2 / (1.0 + gamma)
    return shrunk / (tau2 + shrunk)


def gamma_for_alpha(alpha: float, sigma2: float, tau2: float) -> float:
    """Inverse of :func:`alpha_for_gamma` on ``[0, sigma2 / (sigma2 + tau2)]``."""
    alpha_max = sigma2 / (sigma2 + tau2)
    if not 0.0 <= alpha <= alpha_max:
        raise DomainError(f"alpha must lie in [0, {alpha_max}], got {alpha}")
    if alpha == 0.0:
        return math.inf
    if alpha == alpha_max:
        return 0.0
    # alpha * tau2 / (1 - alpha) = sigma2 / (1 + gamma)
    gamma = (sigma2 * (1.0 - alpha) / tau2) / alpha - 1.0
    return max(gamma, 0.0)


def smoothing_diag(a, gamma: float) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if math.isinf(gamma):
        return np.where(a > 0, 0.0, 1.0)
    return 1.0 / np.sqrt(1.0 + gamma * a)


def build_profile(verdict_or_weights, gamma: float = math.inf) -> RiskProfile:
    if isinstance(verdict_or_weights, OutlierVerdict):
        a = verdict_or_weights.weights
    else:
        a = np.array(verdict_or_weights, dtype=float).reshape(-1)
    if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
        raise DomainError("risk weights must lie in [0, 1]")
    if gamma < 0 or math.isnan(gamma):
        raise DomainError(f"gamma must be >= 0 or inf, got {gamma}")
    A = smoothing_diag(a, gamma)
    a.setflags(write=False)
    A.setflags(write=False)
    return RiskProfile(a=a, gamma=float(gamma), A_diag=A)


def identity_profile(n: int) -> RiskProfile:
    return build_profile(np.zeros(n), 0.0)


def write_verdict_csv(path, record_ids, verdict: OutlierVerdict, weights=None) -> Path:
    path = Path(path)
    a = verdict.weights if weights is None else np.asarray(weights, dtype=float)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "nn_distance", "a_i", "at_risk"])
        for rid, nn, ai, flag in zip(record_ids, verdict.nn_distance, a, verdict.at_risk):
            writer.writerow([rid, repr(float(nn)), repr(float(ai)), int(flag)])
    return path
