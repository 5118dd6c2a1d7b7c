"""Classical weighted-ratio estimator and posterior population-mean summaries."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .cells import CellTable, InvalidInputError, UnitRecord, normalize_weights
from .diagnostics import effective_sample_size, split_rhat

INTERVAL_LEVELS = (0.5, 0.8, 0.95)
MIN_DRAWS = 100


@dataclass(frozen=True)
class EstimateSummary:
    """Point estimate with spread and, for posterior summaries, central intervals.

    ``intervals`` maps a level (0.5, 0.8, 0.95) to its (lower, upper) pair.
    For the classical estimator ``median`` is None and ``intervals`` is empty.
    """

    point: float
    sd: float
    median: float | None = None
    intervals: dict[float, tuple[float, float]] = field(default_factory=dict)
    warning: str | None = None

    def interval(self, level: float) -> tuple[float, float]:
        return self.intervals[level]

    def to_dict(self) -> dict:
        out = {"mean": self.point, "median": self.median, "sd": self.sd}
        if self.intervals:
            lo95, hi95 = self.intervals[0.95]
            lo50, hi50 = self.intervals[0.5]
            out.update({"q2.5": lo95, "q25": lo50, "q75": hi50, "q97.5": hi95})
            lo80, hi80 = self.intervals[0.8]
            out.update({"q10": lo80, "q90": hi80})
        return out


def hajek_estimate(weights, outcomes) -> float:
    """sum w_i y_i / sum w_i, rounded once from the exact rational value.

    Exact rational accumulation makes the result independent of any rescaling
    of the weights that is itself exact in floating point.
    """
    num = Fraction(0)
    den = Fraction(0)
    for wi, yi in zip(np.asarray(weights, dtype=float).tolist(), np.asarray(outcomes, dtype=float).tolist()):
        fw = Fraction(wi)
        num += fw * Fraction(yi)
        den += fw
    return float(num / den)


def classical_from_arrays(weights, outcomes) -> EstimateSummary:
    w = np.asarray(weights, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    if w.size == 0 or w.shape != y.shape:
        raise InvalidInputError("weights and outcomes must be nonempty and of equal length")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("outcomes must be finite")
    wn = normalize_weights(w)
    theta = hajek_estimate(w, y)
    n = w.size
    if n == 1:
        return EstimateSummary(point=theta, sd=math.nan, warning="standard error undefined for n = 1")
    sd = math.sqrt(math.fsum(wn**2 * (y - theta) ** 2)) / n
    return EstimateSummary(point=theta, sd=sd)


def classical_estimate(records: Iterable[UnitRecord]) -> EstimateSummary:
    """Weighted ratio estimate with the with-replacement design standard error.

    The standard error is computed on weights rescaled to mean one.
    """
    records = list(records)
    if not records:
        raise InvalidInputError("no records")
    return classical_from_arrays([r.weight for r in records], [r.outcome for r in records])


def normal_interval(summary: EstimateSummary, level: float = 0.95) -> tuple[float, float]:
    z = float(norm.ppf(0.5 + level / 2))
    return summary.point - z * summary.sd, summary.point + z * summary.sd


# ---------------------------------------------------------------------------
# posterior population mean


def theta_draws(
    mu,
    q,
    ct: CellTable,
    n_total: float,
    *,
    sigma=None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Population mean for each posterior draw.

    ``mu`` and ``q`` have shape (draws, J). Nonsampled counts N_j - n_j are
    clamped at zero and the total divides by sum_j max(N_j, n_j). By default the
    nonsampled cell mean is replaced by its predictive mean; passing ``rng``
    draws it from the posterior predictive instead (``sigma`` is then required
    for continuous outcomes).
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    n = ct.n.astype(float)
    N = n_total * q
    extra = np.maximum(N - n, 0.0)
    denom = np.sum(np.maximum(N, n), axis=1)
    if ct.outcome_kind == "binary":
        observed = float(np.sum(ct.ycount))
        p = expit(mu)
        if rng is None:
            unobserved = np.sum(extra * p, axis=1)
        else:
            unobserved = np.sum(rng.binomial(np.rint(extra).astype(np.int64), p), axis=1)
    else:
        observed = float(np.sum(n * ct.ybar))
        if rng is None:
            unobserved = np.sum(extra * mu, axis=1)
        else:
            if sigma is None:
                raise ValueError("exact predictive draws need sigma")
            sig = np.asarray(sigma, dtype=float).reshape(-1, 1)
            safe = np.where(extra > 0, extra, 1.0)
            ybar_exc = mu + rng.standard_normal(mu.shape) * sig / np.sqrt(safe)
            unobserved = np.sum(extra * ybar_exc, axis=1)
    return (observed + unobserved) / denom


def theta_draw(p, ct: CellTable) -> float:
    """Population mean implied by one parameter value (predictive-mean form)."""
    return float(theta_draws(p.mu[None, :], np.asarray(p.q)[None, :], ct, p.N_total)[0])


def summarize_draws(draws) -> EstimateSummary:
    """Mean, median, sd and central 50/80/95% intervals.

    Quantiles use linear interpolation between order statistics (type 7).
    """
    x = np.asarray(draws, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no draws")
    warning = None
    if x.size < MIN_DRAWS:
        warning = f"only {x.size} draws; intervals are unreliable"
        warnings.warn(warning, stacklevel=2)
    probs = []
    for level in INTERVAL_LEVELS:
        probs += [0.5 - level / 2, 0.5 + level / 2]
    qs = np.quantile(x, [0.5] + probs, method="linear")
    intervals = {}
    for i, level in enumerate(INTERVAL_LEVELS):
        lo, hi = float(qs[1 + 2 * i]), float(qs[2 + 2 * i])
        intervals[level] = (lo, hi)
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    point = float(np.mean(x))
    if np.ptp(x) == 0:
        sd, point = 0.0, float(x[0])
    return EstimateSummary(point=point, sd=sd, median=float(qs[0]), intervals=intervals, warning=warning)


# ---------------------------------------------------------------------------
# fit report


def _json_float(v) -> float | None:
    v = float(v)
    return v if math.isfinite(v) else None


def posterior_report(draws, ct: CellTable) -> dict:
    """Estimate, per-cell summaries and convergence diagnostics of a fit.

    ``draws`` is a :class:`bnfp.sampler.PosteriorDraws`. Non-finite values
    (diagnostics of fixed parameters, say) become None.
    """
    est = summarize_draws(draws.theta).to_dict()
    estimate = {k: _json_float(est[k]) for k in ("mean", "median", "sd", "q2.5", "q25", "q75", "q97.5")}
    mu = draws.flat("mu")
    q = draws.flat("q")
    cells = []
    for j in range(ct.J):
        row = {
            "w": float(ct.w[j]),
            "n": int(ct.n[j]),
            "mu_mean": _json_float(mu[:, j].mean()),
            "mu_sd": _json_float(mu[:, j].std(ddof=1)),
            "q_mean": _json_float(q[:, j].mean()),
            "q_sd": _json_float(q[:, j].std(ddof=1)),
        }
        if ct.outcome_kind == "binary":
            p = expit(mu[:, j])
            row["p_mean"] = _json_float(p.mean())
            row["p_sd"] = _json_float(p.std(ddof=1))
        cells.append(row)
    rhat, ess = {}, {}
    for name in draws.scalar_names:
        arr = draws.theta if name == "theta" else draws.params[name]
        if arr.shape[1] >= 4:
            rhat[name] = _json_float(split_rhat(arr))
            ess[name] = _json_float(effective_sample_size(arr))
        else:
            rhat[name] = ess[name] = None
    diagnostics = {
        "rhat": rhat,
        "ess": ess,
        "divergences": int(np.sum(draws.divergent)),
        "step_size": [float(s) for s in draws.step_size],
        "parameterization": draws.parameterization,
    }
    return {"estimate": estimate, "cells": cells, "diagnostics": diagnostics}
