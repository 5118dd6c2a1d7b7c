"""Squared-exponential-plus-nugget covariance and Gaussian log-density."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

# relative to the mean diagonal; 0 is tried first
JITTER_LADDER = (1e-10, 1e-8, 1e-6)
LOG_2PI = math.log(2.0 * math.pi)


class NumericDomainError(ValueError):
    """Non-finite or out-of-domain numeric input."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Cholesky factorization failed even at the largest jitter."""


@dataclass(frozen=True)
class KernelParams:
    tau: float
    ell: float
    delta: float

    def __post_init__(self) -> None:
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise NumericDomainError(f"tau must be positive, got {self.tau}")
        if not (self.ell > 0 and math.isfinite(self.ell)):
            raise NumericDomainError(f"ell must be positive, got {self.ell}")
        if not 0.0 <= self.delta <= 1.0:
            raise NumericDomainError(f"delta must lie in [0, 1], got {self.delta}")


def covariance_matrix(x, k: KernelParams) -> np.ndarray:
    """Cov(mu_j, mu_k) = tau^2 (1-delta) exp(-(x_j-x_k)^2 / ell^2) + tau^2 delta [j == k].

    Note the length scale enters as ``ell**2`` without the usual factor 2.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericDomainError("x must be finite")
    d2 = (x[:, None] - x[None, :]) ** 2
    tau2 = k.tau * k.tau
    cov = tau2 * (1.0 - k.delta) * np.exp(-d2 / (k.ell * k.ell))
    cov[np.diag_indices_from(cov)] = tau2
    # exact symmetry from the upper triangle
    upper = np.triu(cov)
    return upper + np.triu(cov, 1).T


def cholesky_with_jitter(cov) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``cov + jitter * I`` and the jitter used.

    Jitter escalates over 0 and :data:`JITTER_LADDER` times the mean diagonal.
    """
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        raise NumericDomainError("covariance has non-finite entries")
    scale = float(np.mean(np.diag(cov))) if cov.size else 1.0
    for rel in (0.0,) + JITTER_LADDER:
        jitter = rel * scale
        try:
            L = np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]) if jitter else cov)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0):
            if jitter:
                log.debug("cholesky needed jitter %.3g", jitter)
            return L, jitter
    raise SingularMatrixError(f"covariance not positive definite at jitter {JITTER_LADDER[-1]:g} x mean diag")


def gp_logpdf(mu, mean, cov) -> float:
    """Full multivariate normal log-density log N(mu | mean, cov)."""
    mu = np.asarray(mu, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if mu.shape != mean.shape or cov.shape != (mu.size, mu.size):
        raise ValueError("dimension mismatch")
    L, _ = cholesky_with_jitter(cov)
    z = scipy.linalg.solve_triangular(L, mu - mean, lower=True)
    return float(-0.5 * z @ z - np.sum(np.log(np.diag(L))) - 0.5 * mu.size * LOG_2PI)
