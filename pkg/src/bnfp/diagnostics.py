"""Split-chain potential scale reduction and effective sample size.

Both take an array of shape ``(chains, draws)`` for a single scalar quantity
and return ``nan`` when the draws have no variance (not applicable).
"""

from __future__ import annotations

import math

import numpy as np


def _split(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("draws must have shape (chains, draws)")
    n = x.shape[1]
    if n < 4:
        raise ValueError("need at least 4 draws per chain")
    half = n // 2
    # an odd middle draw is dropped
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def _variances(x: np.ndarray) -> tuple[float, float]:
    m, n = x.shape
    W = float(np.mean(np.var(x, axis=1, ddof=1)))
    B_over_n = float(np.var(np.mean(x, axis=1), ddof=1)) if m > 1 else 0.0
    return W, (n - 1) / n * W + B_over_n


def split_rhat(draws) -> float:
    x = _split(draws)
    if x.shape[0] < 2 or not np.all(np.isfinite(x)):
        return math.nan
    W, var_plus = _variances(x)
    if not W > 0:
        return math.nan
    return math.sqrt(var_plus / W)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance at every lag, one row per chain (FFT)."""
    m, n = x.shape
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return acov / n


def effective_sample_size(draws) -> float:
    """Cross-chain ESS from split chains, truncated with Geyer's initial monotone sequence.

    Capped at the total number of draws.
    """
    x = _split(draws)
    m, n = x.shape
    if not np.all(np.isfinite(x)):
        return math.nan
    W, var_plus = _variances(x)
    if not W > 0:
        return math.nan
    acov = _autocovariance(x).mean(axis=0)
    rho = 1.0 - (W - acov) / var_plus
    rho[0] = 1.0
    pair_sums = []
    prev = math.inf
    for t in range(0, n - 1, 2):
        s = rho[t] + rho[t + 1]
        if s <= 0:
            break
        s = min(s, prev)
        pair_sums.append(s)
        prev = s
    tau = -1.0 + 2.0 * math.fsum(pair_sums)
    total = m * n
    if tau <= 0:
        return float(total)
    return float(min(total, total / tau))
