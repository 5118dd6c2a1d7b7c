"""Joint posterior for cell proportions and the Gaussian-process cell means.

Parameters on the constrained scale are ``beta`` (slope of the GP mean in the
log-weight), ``sigma`` (residual sd, continuous outcomes only), the kernel
``(tau, ell, delta)``, the latent cell means ``mu`` and the population cell
proportions ``q`` on the simplex. The population size is configuration, so the
cell sizes are ``N_j = N_total * q_j``.

The flat prior on the cell sizes only identifies their proportions, so ``q``
carries a Dirichlet(1, ..., 1) prior (uniform on the simplex). Multinomial and
binomial coefficients are dropped; every Gaussian constant is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np
import scipy.linalg
from scipy.special import expit, gammaln, log_expit

from . import _density
from .cells import CellTable
from .gp import LOG_2PI, KernelParams, NumericDomainError, covariance_matrix, cholesky_with_jitter, gp_logpdf

BETA_SCALE = _density.BETA_SCALE
HYPER_SCALE = _density.HYPER_SCALE
HYPER_NAMES = ("beta", "sigma", "tau", "ell", "delta")

Parameterization = Literal["centered", "noncentered", "auto"]


@dataclass(frozen=True)
class ModelParams:
    beta: float
    sigma: float | None
    kernel: KernelParams
    mu: np.ndarray
    q: np.ndarray
    N_total: float

    def __post_init__(self) -> None:
        if self.sigma is not None and not self.sigma > 0:
            raise NumericDomainError(f"sigma must be positive, got {self.sigma}")
        q = np.asarray(self.q, dtype=float)
        if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
            raise NumericDomainError("q must lie on the simplex")

    @property
    def N(self) -> np.ndarray:
        return self.N_total * np.asarray(self.q)

    def inclusion_constant(self, n: int, w) -> float:
        """The constant c with inclusion probability c / w_j; derived, never sampled."""
        return float(n / np.sum(self.N / np.asarray(w)))


@dataclass(frozen=True)
class ModelConfig:
    """Model options.

    ``fixed`` pins any of beta/sigma/tau/ell/delta at a constrained value (the
    coordinate then leaves the sampled vector and its prior term is dropped);
    ``fixed_q`` does the same for the cell proportions. ``sigma_prior_scale``
    overrides the default half-Cauchy scale of 2.5 * sd(y).
    """

    n_total: float
    parameterization: Parameterization = "auto"
    sigma_prior_scale: float | None = None
    fixed: Mapping[str, float] = field(default_factory=dict)
    fixed_q: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.n_total > 0:
            raise ValueError("n_total must be positive")
        if self.parameterization not in ("centered", "noncentered", "auto"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        unknown = set(self.fixed) - set(HYPER_NAMES)
        if unknown:
            raise ValueError(f"cannot fix {sorted(unknown)}")


def choose_parameterization(ct: CellTable) -> str:
    """Centered latent means when cells carry enough data, non-centered otherwise."""
    per_cell = ct.n_total / ct.J
    threshold = 10.0 if ct.outcome_kind == "continuous" else 40.0
    return "centered" if per_cell >= threshold else "noncentered"


# ---------------------------------------------------------------------------
# component densities


def halfcauchy_logpdf(v: float, scale: float) -> float:
    return math.log(2.0 / (math.pi * scale)) - math.log1p((v / scale) ** 2)


def log_prior_terms(p: ModelParams, sd_y: float, sigma_scale: float | None = None) -> dict[str, float]:
    """Per-parameter prior log-densities on the constrained scale."""
    if sigma_scale is None:
        sigma_scale = sigma_prior_scale(sd_y)
    J = np.asarray(p.q).size
    terms = {
        "beta": -0.5 * (p.beta / BETA_SCALE) ** 2 - math.log(BETA_SCALE) - 0.5 * LOG_2PI,
        "tau": halfcauchy_logpdf(p.kernel.tau, HYPER_SCALE),
        "ell": halfcauchy_logpdf(p.kernel.ell, HYPER_SCALE),
        "delta": 0.0,
        # uniform density on the (J-1)-simplex
        "q": float(gammaln(J)),
    }
    if p.sigma is not None:
        terms["sigma"] = halfcauchy_logpdf(p.sigma, sigma_scale)
    return terms


def log_prior(p: ModelParams, sd_y: float, sigma_scale: float | None = None) -> float:
    return math.fsum(log_prior_terms(p, sd_y, sigma_scale).values())


def sigma_prior_scale(sd_y: float) -> float:
    # a constant sample leaves sd(y) = 0; fall back to unit scale
    return 2.5 * sd_y if sd_y > 0 else 2.5


def multinomial_loglik(n, q, w) -> float:
    """sum_j n_j log pi_j with pi_j proportional to q_j / w_j (coefficient omitted).

    Returns ``-inf`` when a cell with observations gets zero probability.
    """
    n = np.asarray(n, dtype=float)
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    a = q / w
    pi = a / a.sum()
    if np.any((pi <= 0) & (n > 0)):
        return -math.inf
    mask = n > 0
    return float(np.sum(n[mask] * np.log(pi[mask])))


def continuous_loglik(ct: CellTable, mu, sigma: float) -> float:
    """Unit-level Gaussian log-likelihood written through cell means and sums of squares."""
    if not sigma > 0:
        raise NumericDomainError(f"sigma must be positive, got {sigma}")
    mu = np.asarray(mu, dtype=float)
    n = ct.n.astype(float)
    ntot = n.sum()
    quad = np.sum(n * (ct.ybar - mu) ** 2) + np.sum(ct.s2)
    return float(-0.5 * quad / sigma**2 - ntot * math.log(sigma) - 0.5 * ntot * LOG_2PI)


def binary_loglik(ct: CellTable, mu) -> float:
    """Binomial cell totals with success probability expit(mu_j) (coefficients omitted)."""
    mu = np.asarray(mu, dtype=float)
    y = ct.ycount.astype(float)
    n = ct.n.astype(float)
    return float(np.sum(y * log_expit(mu) + (n - y) * log_expit(-mu)))


# ---------------------------------------------------------------------------
# transforms


def stick_breaking(u) -> tuple[np.ndarray, float]:
    """Map J-1 reals to the J-simplex; returns (q, log-Jacobian). Zeros give the uniform point."""
    u = np.asarray(u, dtype=float)
    J = u.size + 1
    q = np.empty(J)
    remaining = 1.0
    logjac = 0.0
    for k in range(J - 1):
        a = u[k] - math.log(J - 1 - k)
        z = expit(a)
        q[k] = remaining * z
        logjac += float(log_expit(a) + log_expit(-a)) + math.log(remaining)
        remaining -= q[k]
    q[J - 1] = remaining
    return q, logjac


def inverse_stick_breaking(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    J = q.size
    u = np.empty(J - 1)
    remaining = 1.0
    for k in range(J - 1):
        z = q[k] / remaining
        u[k] = math.log(z) - math.log1p(-z) + math.log(J - 1 - k)
        remaining -= q[k]
    return u


class BNFPModel:
    """Posterior for one cell table under one configuration.

    ``logp_grad`` is the compiled path used by the sampler; ``constrain``,
    ``unconstrain`` and ``log_posterior_terms`` are plain numpy.
    """

    def __init__(self, ct: CellTable, config: ModelConfig):
        self.ct = ct
        self.config = config
        self.binary = ct.outcome_kind == "binary"
        param = config.parameterization
        self.parameterization = choose_parameterization(ct) if param == "auto" else param
        self.noncentered = self.parameterization == "noncentered"
        self.sigma_scale = (
            config.sigma_prior_scale if config.sigma_prior_scale is not None else sigma_prior_scale(ct.sd_y)
        )
        hfree = np.ones(5, dtype=np.bool_)
        hfixed = np.full(5, np.nan)
        for k, name in enumerate(HYPER_NAMES):
            if name in config.fixed:
                hfree[k] = False
                hfixed[k] = float(config.fixed[name])
        if self.binary:
            hfree[1] = False
            hfixed[1] = 1.0
        self._hfree = hfree
        self._hfixed = hfixed
        J = ct.J
        self.qfree = config.fixed_q is None
        if self.qfree:
            self._qfixed = np.full(J, 1.0 / J)
        else:
            qf = np.asarray(config.fixed_q, dtype=float)
            if qf.shape != (J,) or abs(qf.sum() - 1) > 1e-9 or np.any(qf < 0):
                raise ValueError("fixed_q must be a simplex of length J")
            self._qfixed = qf
        self._data = (
            ct.x.astype(float),
            ct.w.astype(float),
            ct.n.astype(float),
            ct.ybar.astype(float),
            ct.s2.astype(float),
            (ct.ycount if self.binary else np.zeros(J)).astype(float),
        )
        self.names = self._coordinate_names()
        self.dim = len(self.names)

    def _coordinate_names(self) -> list[str]:
        labels = {"beta": "beta", "sigma": "log_sigma", "tau": "log_tau", "ell": "log_ell", "delta": "logit_delta"}
        names = [labels[h] for k, h in enumerate(HYPER_NAMES) if self._hfree[k]]
        lat = "z" if self.noncentered else "mu"
        names += [f"{lat}[{j}]" for j in range(self.ct.J)]
        if self.qfree:
            names += [f"stick[{j}]" for j in range(self.ct.J - 1)]
        return names

    # compiled path ---------------------------------------------------------

    def logp_grad(self, v) -> tuple[float, np.ndarray]:
        v = np.ascontiguousarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} coordinates, got {v.shape}")
        return _density.logp_grad(
            v, *self._data, self.binary, self.sigma_scale,
            self._hfree, self._hfixed, self.noncentered, self.qfree, self._qfixed,
        )

    def log_posterior(self, v) -> float:
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)):
            raise NumericDomainError("non-finite parameter entries")
        return float(self.logp_grad(v)[0])

    def grad_log_posterior(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)):
            raise NumericDomainError("non-finite parameter entries")
        return self.logp_grad(v)[1]

    # numpy path ------------------------------------------------------------

    def _split(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} coordinates, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericDomainError("non-finite parameter entries")
        pos = 0
        raw = {}
        for k, name in enumerate(HYPER_NAMES):
            if self._hfree[k]:
                raw[name] = v[pos]
                pos += 1
        J = self.ct.J
        lat = v[pos:pos + J]
        pos += J
        stick = v[pos:pos + J - 1] if self.qfree else None
        return raw, lat, stick

    def constrain(self, v) -> tuple[ModelParams, float]:
        """Constrained parameters and the log-Jacobian of the scalar and simplex maps."""
        raw, lat, stick = self._split(v)
        logjac = 0.0
        vals = {}
        for k, name in enumerate(HYPER_NAMES):
            if name not in raw:
                vals[name] = self._hfixed[k]
                continue
            u = float(raw[name])
            if name == "beta":
                vals[name] = u
            elif name == "delta":
                vals[name] = float(expit(u))
                logjac += float(log_expit(u) + log_expit(-u))
            else:
                vals[name] = math.exp(u)
                logjac += u
        kernel = KernelParams(vals["tau"], vals["ell"], vals["delta"])
        if self.noncentered:
            L, _ = cholesky_with_jitter(covariance_matrix(self.ct.x, kernel))
            mu = self.ct.x * vals["beta"] + L @ lat
        else:
            mu = lat.copy()
        if self.qfree:
            q, lj = stick_breaking(stick)
            logjac += lj
        else:
            q = self._qfixed.copy()
        p = ModelParams(
            beta=vals["beta"],
            sigma=None if self.binary else vals["sigma"],
            kernel=kernel,
            mu=mu,
            q=q,
            N_total=self.config.n_total,
        )
        return p, logjac

    def unconstrain(self, p: ModelParams) -> np.ndarray:
        out = []
        for k, name in enumerate(HYPER_NAMES):
            if not self._hfree[k]:
                continue
            if name == "beta":
                out.append(p.beta)
            elif name == "sigma":
                out.append(math.log(p.sigma))
            elif name == "delta":
                d = p.kernel.delta
                out.append(math.log(d) - math.log1p(-d))
            else:
                out.append(math.log(getattr(p.kernel, name)))
        if self.noncentered:
            L, _ = cholesky_with_jitter(covariance_matrix(self.ct.x, p.kernel))
            lat = scipy.linalg.solve_triangular(L, np.asarray(p.mu) - self.ct.x * p.beta, lower=True)
        else:
            lat = np.asarray(p.mu, dtype=float)
        parts = [np.asarray(out, dtype=float), lat]
        if self.qfree:
            parts.append(inverse_stick_breaking(p.q))
        return np.concatenate(parts)

    def log_posterior_terms(self, v) -> dict[str, float]:
        """The log-posterior split into likelihood, GP, cell-count, prior and Jacobian terms."""
        p, logjac = self.constrain(v)
        ct = self.ct
        terms = {}
        terms["outcome"] = binary_loglik(ct, p.mu) if self.binary else continuous_loglik(ct, p.mu, p.sigma)
        if self.noncentered:
            _, lat, _ = self._split(v)
            terms["latent"] = float(-0.5 * lat @ lat - 0.5 * lat.size * LOG_2PI)
        else:
            terms["latent"] = gp_logpdf(p.mu, ct.x * p.beta, covariance_matrix(ct.x, p.kernel))
        terms["counts"] = multinomial_loglik(ct.n, p.q, ct.w)
        prior = log_prior_terms(p, ct.sd_y, self.sigma_scale)
        free = self._free_names() | ({"q"} if self.qfree else set())
        terms["prior"] = math.fsum(val for name, val in prior.items() if name in free)
        terms["jacobian"] = logjac
        return terms

    def _free_names(self) -> set[str]:
        return {name for k, name in enumerate(HYPER_NAMES) if self._hfree[k]}


def log_posterior(v, data: CellTable, config: ModelConfig) -> float:
    return BNFPModel(data, config).log_posterior(v)


def grad_log_posterior(v, data: CellTable, config: ModelConfig) -> np.ndarray:
    return BNFPModel(data, config).grad_log_posterior(v)
