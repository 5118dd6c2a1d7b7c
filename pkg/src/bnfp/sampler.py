"""Hamiltonian Monte Carlo with step-size and diagonal-metric adaptation.

Two transition kernels are available: the no-U-turn sampler (multinomial
trajectory sampling with the generalized U-turn criterion, the default) and
static HMC whose number of leapfrog steps is drawn uniformly each iteration.
Warmup follows the usual windowed scheme: a fast initial buffer that only tunes
the step size, slow windows of doubling length whose draws estimate the
diagonal inverse metric, and a terminal buffer that re-tunes the step size for
the final metric.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Literal

import numpy as np

from . import _density
from .estimators import theta_draws

log = logging.getLogger(__name__)

LogpGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]

DIVERGENCE_THRESHOLD = 1000.0
INIT_RADIUS = 2.0
MAX_INIT_TRIES = 100


class SamplerError(RuntimeError):
    """Initialization failure or too many post-warmup divergences."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler settings. ``iter``/``warmup`` of None resolve per outcome kind."""

    chains: int = 3
    iter: int | None = None
    warmup: int | None = None
    seed: int = 0
    max_leapfrog: int = 1024
    target_accept: float = 0.8
    algorithm: Literal["nuts", "hmc"] = "nuts"
    trajectory_length: float = 2.0
    threads: int = 1
    max_divergence_rate: float = 0.25

    def __post_init__(self) -> None:
        for name in ("chains", "max_leapfrog", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iter is not None and self.iter < 1:
            raise ValueError("iter must be >= 1")
        if self.warmup is not None and self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.algorithm not in ("nuts", "hmc"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")

    def resolved(self, outcome_kind: str = "continuous") -> "SamplerConfig":
        default = 6000 if outcome_kind == "binary" else 3000
        it = self.iter if self.iter is not None else default
        wu = self.warmup if self.warmup is not None else it
        return replace(self, iter=it, warmup=wu)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Stream for one chain; depends only on (seed, chain)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(chain,)))


# ---------------------------------------------------------------------------
# adaptation


class DualAveraging:
    def __init__(self, step_size: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.t = 0
        self.hbar = 0.0
        self.log_eps_bar = 0.0

    def update(self, accept_stat: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.hbar = (1.0 - eta) * self.hbar + eta * (self.target - accept_stat)
        log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.hbar
        x = self.t ** (-self.kappa)
        self.log_eps_bar = x * log_eps + (1.0 - x) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def warmup_windows(warmup: int) -> list[int]:
    """Iteration indices (exclusive ends) at which the metric is re-estimated."""
    if warmup < 20:
        return []
    init, term, base = 75, 50, 25
    if init + term + base > warmup:
        init = int(0.15 * warmup)
        term = int(0.1 * warmup)
        base = warmup - init - term
    ends = []
    start = init
    size = base
    last = warmup - term
    while start < last:
        end = start + size
        # absorb a too-short final window
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start = end
        size *= 2
    return ends


class _Welford:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def regularized_variance(self) -> np.ndarray:
        n = self.n
        var = self.m2 / (n - 1)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


# ---------------------------------------------------------------------------
# integrator and transitions


@dataclass
class _Point:
    theta: np.ndarray
    p: np.ndarray
    lp: float
    grad: np.ndarray


@dataclass
class _Tree:
    first: _Point
    last: _Point
    proposal: _Point
    log_w: float
    rho: np.ndarray
    n_leapfrog: int
    accept_sum: float
    turning: bool = False
    diverged: bool = False


class Hamiltonian:
    def __init__(self, logp_grad: LogpGrad, inv_metric: np.ndarray):
        self.logp_grad = logp_grad
        self.inv_metric = inv_metric

    def energy(self, pt: _Point) -> float:
        if not math.isfinite(pt.lp):
            return math.inf
        return -pt.lp + 0.5 * float(np.dot(self.inv_metric * pt.p, pt.p))

    def leapfrog(self, pt: _Point, eps: float) -> _Point:
        p = pt.p + 0.5 * eps * pt.grad
        theta = pt.theta + eps * self.inv_metric * p
        lp, grad = self.logp_grad(theta)
        if not (math.isfinite(lp) and np.all(np.isfinite(grad))):
            return _Point(theta, p, -math.inf, pt.grad)
        return _Point(theta, p + 0.5 * eps * grad, float(lp), grad)

    def sample_momentum(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.inv_metric.size) / np.sqrt(self.inv_metric)


def _uturn(h: Hamiltonian, rho: np.ndarray, a: _Point, b: _Point) -> bool:
    return (
        float(np.dot(h.inv_metric * a.p, rho)) <= 0.0
        or float(np.dot(h.inv_metric * b.p, rho)) <= 0.0
    )


class NutsKernel:
    def __init__(self, h: Hamiltonian, step_size: float, max_depth: int):
        self.h = h
        self.step_size = step_size
        self.max_depth = max_depth

    def _leaf(self, pt: _Point, eps: float, H0: float) -> _Tree:
        new = self.h.leapfrog(pt, eps)
        H = self.h.energy(new)
        dH = H - H0 if math.isfinite(H) else math.inf
        accept = math.exp(min(0.0, -dH)) if math.isfinite(dH) else 0.0
        tree = _Tree(new, new, new, -dH, new.p.copy(), 1, accept)
        tree.diverged = dH > DIVERGENCE_THRESHOLD
        return tree

    def _merge_check(self, a: _Tree, b: _Tree) -> bool:
        """U-turn check across two adjacent subtrees (a precedes b in integration order)."""
        h = self.h
        rho = a.rho + b.rho
        if _uturn(h, rho, a.first, b.last):
            return True
        # extra checks spanning the seam
        if _uturn(h, a.rho + b.first.p, a.first, b.first):
            return True
        return _uturn(h, b.rho + a.last.p, a.last, b.last)

    def _build(self, start: _Point, eps: float, depth: int, H0: float, rng) -> _Tree:
        if depth == 0:
            return self._leaf(start, eps, H0)
        left = self._build(start, eps, depth - 1, H0, rng)
        if left.turning or left.diverged:
            return left
        right = self._build(left.last, eps, depth - 1, H0, rng)
        n = left.n_leapfrog + right.n_leapfrog
        acc = left.accept_sum + right.accept_sum
        if right.turning or right.diverged:
            out = _Tree(left.first, right.last, left.proposal, left.log_w, left.rho, n, acc)
            out.turning, out.diverged = right.turning, right.diverged
            return out
        log_w = np.logaddexp(left.log_w, right.log_w)
        proposal = right.proposal if math.log(rng.random()) < right.log_w - log_w else left.proposal
        out = _Tree(left.first, right.last, proposal, float(log_w), left.rho + right.rho, n, acc)
        out.turning = self._merge_check(left, right)
        return out

    def transition(self, current: _Point, rng: np.random.Generator):
        h = self.h
        p0 = h.sample_momentum(rng)
        start = _Point(current.theta, p0, current.lp, current.grad)
        H0 = h.energy(start)
        # trajectory kept in forward time order: back ... front
        traj = _Tree(start, start, start, 0.0, p0.copy(), 0, 0.0)
        n_leapfrog = 0
        accept_sum = 0.0
        diverged = False
        depth = 0
        while depth < self.max_depth:
            forward = rng.random() < 0.5
            if forward:
                sub = self._build(traj.last, self.step_size, depth, H0, rng)
            else:
                sub = self._build(traj.first, -self.step_size, depth, H0, rng)
            n_leapfrog += sub.n_leapfrog
            accept_sum += sub.accept_sum
            depth += 1
            if sub.diverged:
                diverged = True
                break
            if sub.turning:
                break
            if math.log(rng.random()) < sub.log_w - traj.log_w:
                traj.proposal = sub.proposal
            log_w = float(np.logaddexp(traj.log_w, sub.log_w))
            if forward:
                turning = self._merge_check(traj, sub)
                traj = _Tree(traj.first, sub.last, traj.proposal, log_w, traj.rho + sub.rho, 0, 0.0)
            else:
                # the backward subtree's 'last' is the new trajectory front in time order
                rev = _Tree(sub.last, sub.first, sub.proposal, sub.log_w, sub.rho, 0, 0.0)
                turning = self._merge_check(rev, traj)
                traj = _Tree(sub.last, traj.last, traj.proposal, log_w, traj.rho + sub.rho, 0, 0.0)
            if turning:
                break
        new = traj.proposal
        stat = accept_sum / max(n_leapfrog, 1)
        return _Point(new.theta, new.p, new.lp, new.grad), stat, n_leapfrog, depth, diverged


class StaticHmcKernel:
    """Metropolized leapfrog trajectory with uniformly jittered step count."""

    def __init__(self, h: Hamiltonian, step_size: float, max_steps: int, trajectory_length: float):
        self.h = h
        self.step_size = step_size
        self.max_steps = max_steps
        self.trajectory_length = trajectory_length

    def transition(self, current: _Point, rng: np.random.Generator):
        h = self.h
        cap = int(min(self.max_steps, max(1, math.ceil(self.trajectory_length / self.step_size))))
        steps = int(rng.integers(1, cap + 1))
        pt = _Point(current.theta, h.sample_momentum(rng), current.lp, current.grad)
        H0 = h.energy(pt)
        diverged = False
        for _ in range(steps):
            pt = h.leapfrog(pt, self.step_size)
            if not math.isfinite(pt.lp) or h.energy(pt) - H0 > DIVERGENCE_THRESHOLD:
                diverged = True
                break
        dH = h.energy(pt) - H0 if not diverged else math.inf
        accept = math.exp(min(0.0, -dH)) if math.isfinite(dH) else 0.0
        if rng.random() < accept:
            return pt, accept, steps, 0, diverged
        return current, accept, steps, 0, diverged


# ---------------------------------------------------------------------------
# a single chain


@dataclass
class ChainResult:
    draws: np.ndarray
    lp: np.ndarray
    accept_stat: np.ndarray
    n_leapfrog: np.ndarray
    tree_depth: np.ndarray
    divergent: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    warmup_divergences: int = 0
    init_tries: int = 1


def _initial_point(logp_grad: LogpGrad, dim: int, rng, init: np.ndarray | None):
    tries = 0
    while tries < MAX_INIT_TRIES:
        tries += 1
        theta = np.array(init, dtype=float) if init is not None and tries == 1 else rng.uniform(-INIT_RADIUS, INIT_RADIUS, dim)
        lp, grad = logp_grad(theta)
        if math.isfinite(lp) and np.all(np.isfinite(grad)):
            return _Point(theta, np.zeros(dim), float(lp), np.asarray(grad, dtype=float)), tries
    raise SamplerError(f"no finite log-density after {MAX_INIT_TRIES} initializations")


def _initial_step_size(h: Hamiltonian, pt: _Point, rng) -> float:
    eps = 1.0
    probe = _Point(pt.theta, h.sample_momentum(rng), pt.lp, pt.grad)
    H0 = h.energy(probe)

    def delta(e):
        H = h.energy(h.leapfrog(probe, e))
        return H0 - H if math.isfinite(H) else -math.inf

    d = delta(eps)
    direction = 1 if d > math.log(0.8) else -1
    for _ in range(100):
        eps = eps * 2.0 if direction == 1 else eps / 2.0
        d = delta(eps)
        if direction == 1 and not d > math.log(0.8):
            break
        if direction == -1 and d > math.log(0.8):
            break
    return eps


def run_chain(
    logp_grad: LogpGrad,
    dim: int,
    cfg: SamplerConfig,
    chain: int,
    init: np.ndarray | None = None,
) -> ChainResult:
    """Warm up and sample one chain; ``cfg`` must already be resolved."""
    rng = chain_rng(cfg.seed, chain)
    current, tries = _initial_point(logp_grad, dim, rng, init)
    inv_metric = np.ones(dim)
    h = Hamiltonian(logp_grad, inv_metric)
    eps = _initial_step_size(h, current, rng)
    da = DualAveraging(eps, cfg.target_accept)
    max_depth = max(1, int(math.floor(math.log2(cfg.max_leapfrog))))

    def make_kernel(step):
        if cfg.algorithm == "nuts":
            return NutsKernel(h, step, max_depth)
        return StaticHmcKernel(h, step, cfg.max_leapfrog, cfg.trajectory_length)

    kernel = make_kernel(eps)
    ends = warmup_windows(cfg.warmup)
    window_starts = [75 if cfg.warmup >= 150 else int(0.15 * cfg.warmup)] + ends[:-1]
    welford = None
    warm_div = 0
    for it in range(cfg.warmup):
        current, stat, _, _, div = kernel.transition(current, rng)
        warm_div += div
        kernel.step_size = da.update(stat)
        if ends and window_starts[0] <= it < ends[-1]:
            if welford is None:
                welford = _Welford(dim)
            welford.add(current.theta)
            if it + 1 in ends:
                inv_metric = welford.regularized_variance()
                h = Hamiltonian(logp_grad, inv_metric)
                eps = _initial_step_size(h, current, rng)
                da.restart(eps)
                kernel = make_kernel(eps)
                welford = None
    if cfg.warmup > 0:
        kernel.step_size = da.final
    step = kernel.step_size

    n = cfg.iter
    draws = np.empty((n, dim))
    lps = np.empty(n)
    acc = np.empty(n)
    nleap = np.empty(n, dtype=np.int64)
    depth = np.empty(n, dtype=np.int64)
    div = np.zeros(n, dtype=bool)
    for it in range(n):
        current, acc[it], nleap[it], depth[it], div[it] = kernel.transition(current, rng)
        draws[it] = current.theta
        lps[it] = current.lp
    return ChainResult(draws, lps, acc, nleap, depth, div, step, h.inv_metric.copy(), warm_div, tries)


def _run_chain_job(args):
    return run_chain(*args)


def sample(
    logp_grad: LogpGrad,
    dim: int,
    cfg: SamplerConfig,
    inits: list[np.ndarray] | None = None,
) -> list[ChainResult]:
    """Run ``cfg.chains`` independent chains; results ordered by chain index."""
    if cfg.iter is None or cfg.warmup is None:
        cfg = cfg.resolved()
    jobs = [(logp_grad, dim, cfg, k, None if inits is None else inits[k]) for k in range(cfg.chains)]
    if cfg.threads > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.threads, cfg.chains)) as ex:
            results = list(ex.map(_run_chain_job, jobs))
    else:
        results = [_run_chain_job(j) for j in jobs]
    total = sum(r.divergent.size for r in results)
    ndiv = int(sum(r.divergent.sum() for r in results))
    if total and ndiv / total > cfg.max_divergence_rate:
        report = {
            "divergences": ndiv,
            "draws": total,
            "step_size": [r.step_size for r in results],
            "mean_accept_stat": [float(r.accept_stat.mean()) for r in results],
        }
        raise SamplerError(f"{ndiv}/{total} post-warmup transitions diverged", report)
    if ndiv:
        log.warning("%d of %d post-warmup transitions diverged", ndiv, total)
    return results


# ---------------------------------------------------------------------------
# the survey model


@dataclass
class PosteriorDraws:
    """Post-warmup draws, arrays shaped (chains, iter, ...).

    ``params`` holds constrained draws: scalar hyperparameters (``sigma`` only
    for continuous outcomes) and per-cell ``mu`` and ``q``; ``theta`` is the
    population mean per draw.
    """

    names: list[str]
    unconstrained: np.ndarray
    params: dict[str, np.ndarray]
    theta: np.ndarray
    lp: np.ndarray
    accept_stat: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    step_size: np.ndarray
    inv_metric: np.ndarray
    outcome_kind: str
    n_total: float
    parameterization: str

    @property
    def chains(self) -> int:
        return self.theta.shape[0]

    @property
    def iter(self) -> int:
        return self.theta.shape[1]

    def flat(self, name: str) -> np.ndarray:
        """Draws of one quantity with chains stacked: shape (chains * iter, ...)."""
        arr = self.theta if name == "theta" else self.params[name]
        return arr.reshape((-1,) + arr.shape[2:])

    @property
    def scalar_names(self) -> list[str]:
        names = ["beta", "sigma", "tau", "ell", "delta"]
        return [k for k in names if k in self.params] + ["theta"]


def run_chains(model, cfg: SamplerConfig, *, exact_predictive: bool = False) -> PosteriorDraws:
    """Sample the posterior of a :class:`bnfp.model.BNFPModel`.

    Raises :class:`SamplerError` on initialization failure or when more than
    ``cfg.max_divergence_rate`` of the post-warmup transitions diverge.
    """
    ct = model.ct
    cfg = cfg.resolved(ct.outcome_kind) if cfg.iter is None or cfg.warmup is None else cfg
    results = sample(model.logp_grad, model.dim, cfg)
    U = np.stack([r.draws for r in results])
    C, S, D = U.shape
    hyper, mu, q = _density.constrain_batch(
        np.ascontiguousarray(U.reshape(C * S, D)), model._data[0], model.binary,
        model._hfree, model._hfixed, model.noncentered, model.qfree, model._qfixed,
    )
    J = ct.J
    params = {}
    for k, name in enumerate(("beta", "sigma", "tau", "ell", "delta")):
        if name == "sigma" and model.binary:
            continue
        params[name] = hyper[:, k].reshape(C, S)
    params["mu"] = mu.reshape(C, S, J)
    params["q"] = q.reshape(C, S, J)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(cfg.chains,))) if exact_predictive else None
    sigma = None if model.binary else hyper[:, 1]
    theta = theta_draws(mu, q, ct, model.config.n_total, sigma=sigma, rng=rng).reshape(C, S)
    return PosteriorDraws(
        names=list(model.names),
        unconstrained=U,
        params=params,
        theta=theta,
        lp=np.stack([r.lp for r in results]),
        accept_stat=np.stack([r.accept_stat for r in results]),
        n_leapfrog=np.stack([r.n_leapfrog for r in results]),
        divergent=np.stack([r.divergent for r in results]),
        step_size=np.array([r.step_size for r in results]),
        inv_metric=np.stack([r.inv_metric for r in results]),
        outcome_kind=ct.outcome_kind,
        n_total=model.config.n_total,
        parameterization=model.parameterization,
    )
