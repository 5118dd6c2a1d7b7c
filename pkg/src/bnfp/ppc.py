"""One-sided posterior predictive p-values per cell.

For binary outcomes the statistic is the cell's count of successes and the
replicates are Binomial(n_j, logit^-1(mu_j)). For continuous outcomes the
statistic is the cell mean and the replicates are N(mu_j, sigma^2 / n_j),
conditioning on sigma per draw. A replicate equal to the observed value counts
as exceeding it.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .cells import CellTable
from .estimators import MIN_DRAWS


@dataclass(frozen=True)
class PpcReport:
    weight: np.ndarray
    n: np.ndarray
    observed: np.ndarray
    pvalue: np.ndarray

    @property
    def min_pvalue(self) -> float:
        return float(self.pvalue.min())

    def count_below(self, alpha: float = 0.05) -> int:
        return int(np.sum(self.pvalue < alpha))

    def rows(self) -> list[dict]:
        return [
            {"cell": j, "weight": float(w), "n": int(n), "observed": float(o), "pvalue": float(p)}
            for j, (w, n, o, p) in enumerate(zip(self.weight, self.n, self.observed, self.pvalue))
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["cell", "weight", "n", "observed", "pvalue"], lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def replicate_statistics(mu, ct: CellTable, rng: np.random.Generator, sigma=None) -> np.ndarray:
    """One replicated statistic per (draw, cell)."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    if ct.outcome_kind == "binary":
        return rng.binomial(ct.n, expit(mu)).astype(float)
    if sigma is None:
        raise ValueError("continuous replicates need sigma draws")
    sig = np.asarray(sigma, dtype=float).reshape(-1, 1)
    return mu + rng.standard_normal(mu.shape) * sig / np.sqrt(ct.n)


def observed_statistics(ct: CellTable) -> np.ndarray:
    return np.asarray(ct.ycount if ct.outcome_kind == "binary" else ct.ybar, dtype=float)


def pvalues_from_replicates(rep, observed) -> np.ndarray:
    """Fraction of replicates at or above the observed statistic, per cell."""
    rep = np.atleast_2d(np.asarray(rep, dtype=float))
    return np.mean(rep >= np.asarray(observed, dtype=float), axis=0)


def posterior_predictive_pvalues(draws, ct: CellTable, rng: np.random.Generator | None = None) -> PpcReport:
    """p_j = mean over draws of 1[T_j(rep) >= T_j(observed)].

    ``draws`` is a :class:`bnfp.sampler.PosteriorDraws` (or anything with a
    ``flat(name)`` method returning ``mu`` and, for continuous outcomes,
    ``sigma`` draws) fitted to ``ct``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    mu = draws.flat("mu")
    if mu.shape[1] != ct.J:
        raise ValueError(f"draws have {mu.shape[1]} cells, data has {ct.J}")
    if mu.shape[0] < MIN_DRAWS:
        warnings.warn(f"only {mu.shape[0]} draws; p-values are coarse", stacklevel=2)
    sigma = None if ct.outcome_kind == "binary" else draws.flat("sigma")
    rep = replicate_statistics(mu, ct, rng, sigma)
    obs = observed_statistics(ct)
    return PpcReport(weight=ct.w.copy(), n=ct.n.copy(), observed=obs, pvalue=pvalues_from_replicates(rep, obs))
