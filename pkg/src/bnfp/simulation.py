"""Synthetic populations, PPS sampling, the prior-draw calibration check and
the design-based vs model-based comparison study.

Two harnesses live here:

* :func:`coherence_check` draws hyperparameters from their priors, builds a
  population with equal-size cells whose weights are 1..J0, samples it with
  probability proportional to 1/w, fits the model and records whether the
  central 50/80/95% posterior intervals cover the truths.
* :func:`comparison_study` fixes one population (a weight scenario plus an
  outcome model), draws repeated PPS samples and compares the model-based and
  classical estimates on average standard error, bias, RMSE and 95% coverage.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .cells import CellTable, InvalidInputError, UnitRecord
from .estimators import INTERVAL_LEVELS, classical_from_arrays, normal_interval, summarize_draws
from .gp import KernelParams, covariance_matrix, cholesky_with_jitter
from .model import BNFPModel, ModelConfig
from .sampler import SamplerConfig, SamplerError, run_chains

log = logging.getLogger(__name__)

OutcomeModel = Literal["prior", "mixture", "quadratic_logit"]

# (cells, lowest, highest weight) of each synthetic scenario
CASES = {
    "case1": (3, 0.6, 1.6),
    "case2": (12, 0.4, 2.5),
    "case3": (48, 0.25, 5.0),
    "case4": (96, 0.19, 9.60),
}


@dataclass(frozen=True)
class PopulationSpec:
    """Cell structure of a population plus the outcome model.

    ``w0`` are the population unit weights of the cells and ``N`` their sizes.
    """

    w0: np.ndarray
    N: np.ndarray
    outcome_model: OutcomeModel
    outcome_kind: str = "continuous"

    def __post_init__(self) -> None:
        w0 = np.asarray(self.w0, dtype=float)
        N = np.asarray(self.N)
        if w0.shape != N.shape or w0.ndim != 1 or w0.size == 0:
            raise InvalidInputError("w0 and N must be 1-d and of equal length")
        if np.any(w0 <= 0) or np.any(N < 1):
            raise InvalidInputError("cell weights must be positive and cell sizes at least 1")
        if self.outcome_model not in ("prior", "mixture", "quadratic_logit"):
            raise InvalidInputError(f"unknown outcome model {self.outcome_model!r}")

    @property
    def N_total(self) -> int:
        return int(np.sum(self.N))


@dataclass
class Population:
    w0: np.ndarray
    y: np.ndarray
    cell: np.ndarray
    spec: PopulationSpec
    hyper: dict[str, float] = field(default_factory=dict)
    mu: np.ndarray | None = None

    @property
    def truth(self) -> float:
        return math.fsum(self.y) / self.y.size

    def cell_means(self) -> np.ndarray:
        return np.bincount(self.cell, weights=self.y) / np.bincount(self.cell)


# ---------------------------------------------------------------------------
# populations


def coherence_cells(J0: int, N_total: int) -> tuple[np.ndarray, np.ndarray]:
    """Weights 1..J0 with equal cell sizes."""
    if N_total % J0:
        raise InvalidInputError("N_total must be a multiple of J0")
    return np.arange(1, J0 + 1, dtype=float), np.full(J0, N_total // J0)


def scenario_cells(case: str, N_total: int) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic weight table for one of the balanced-to-unbalanced scenarios.

    J0 atoms evenly spaced in log-weight between the scenario's extremes; the
    cell sizes follow a normal shape in log-weight whose centre is solved so the
    expected mean weight of a PPS sample is one. Under selection proportional
    to 1/w that expectation is the population harmonic mean, so the weights
    carry the same scale an analyst sees after normalizing the sample.
    """
    if case not in CASES:
        raise InvalidInputError(f"unknown scenario {case!r}; expected one of {sorted(CASES)}")
    J0, lo, hi = CASES[case]
    x = np.linspace(math.log(lo), math.log(hi), J0)
    w = np.exp(x)
    s = (x[-1] - x[0]) / 4.0

    def sample_mean_weight(m):
        f = np.exp(-0.5 * ((x - m) / s) ** 2)
        return float(np.sum(f) / np.sum(f / w)) - 1.0

    m = brentq(sample_mean_weight, x[0] - 10 * s, x[-1] + 10 * s)
    shape = np.exp(-0.5 * ((x - m) / s) ** 2)
    N = apportion(N_total, shape)
    return _sample_scale(w, N), N


def apportion(N_total: int, shape) -> np.ndarray:
    """Integer cell sizes proportional to ``shape``, each at least 1, summing to N_total."""
    p = np.asarray(shape, dtype=float)
    if N_total < p.size:
        raise InvalidInputError("N_total must be at least the number of cells")
    raw = (N_total - p.size) * p / p.sum()
    N = np.floor(raw).astype(np.int64)
    short = N_total - p.size - int(N.sum())
    N[np.argsort(-(raw - N), kind="stable")[:short]] += 1
    return N + 1


def _sample_scale(w: np.ndarray, N: np.ndarray) -> np.ndarray:
    """Rescale so the population harmonic mean weight is one."""
    return w * (np.sum(N / w) / N.sum())


def read_weight_table(path) -> tuple[np.ndarray, np.ndarray]:
    """CSV with header ``weight,count``: one row per population cell."""
    w, N = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"weight", "count"} <= set(reader.fieldnames):
            raise InvalidInputError(f"{path}: expected header 'weight,count'")
        for line, row in enumerate(reader, start=2):
            try:
                w.append(float(row["weight"]))
                N.append(int(row["count"]))
            except (TypeError, ValueError):
                raise InvalidInputError(f"{path}:{line}: malformed row {row}") from None
    w = np.asarray(w)
    N = np.asarray(N, dtype=np.int64)
    if w.size == 0 or np.any(w <= 0) or np.any(N < 1):
        raise InvalidInputError(f"{path}: weights must be positive and counts >= 1")
    return _sample_scale(w, N), N


def draw_prior_hyper(
    rng: np.random.Generator,
    outcome_kind: str,
    sigma_scale: float = 2.5,
    truncate: float | None = None,
) -> dict[str, float]:
    """One draw of (beta, sigma, tau, ell, delta) from the priors.

    ``truncate`` caps the half-Cauchy draws at that multiple of their scale;
    this is for exploration only and breaks calibration.
    """

    def half_cauchy(scale):
        while True:
            v = abs(scale * rng.standard_cauchy())
            if v > 0 and math.isfinite(v) and (truncate is None or v <= truncate * scale):
                return v

    hyper = {"beta": float(rng.normal(0.0, 2.5))}
    if outcome_kind == "continuous":
        hyper["sigma"] = half_cauchy(sigma_scale)
    hyper["tau"] = half_cauchy(2.5)
    hyper["ell"] = half_cauchy(2.5)
    hyper["delta"] = float(rng.uniform())
    return hyper


def generate_population(spec: PopulationSpec, hyper: dict[str, float] | None = None, seed=0) -> Population:
    """Population of ``spec.N_total`` units with outcomes from the chosen model.

    In ``prior`` mode the cell means are mu ~ N(x beta, Sigma) on x = log w0
    under ``hyper`` (drawn from the priors when None).
    """
    rng = np.random.default_rng(seed)
    w0 = np.asarray(spec.w0, dtype=float)
    N = np.asarray(spec.N, dtype=np.int64)
    cell = np.repeat(np.arange(w0.size), N)
    wi = w0[cell]
    kind = spec.outcome_kind
    mu = None
    if spec.outcome_model == "prior":
        redraws = 0
        while True:
            h = hyper if hyper is not None else draw_prior_hyper(rng, kind)
            x = np.log(w0)
            try:
                L, _ = cholesky_with_jitter(covariance_matrix(x, KernelParams(h["tau"], h["ell"], h["delta"])))
            except np.linalg.LinAlgError:
                L = None
            if L is not None:
                mu = x * h["beta"] + L @ rng.standard_normal(w0.size)
                if np.all(np.isfinite(mu)):
                    break
            if hyper is not None:
                raise InvalidInputError("supplied hyperparameters give a non-finite population")
            redraws += 1
            log.info("non-finite prior draw, redrawing (%d)", redraws)
        hyper = dict(h)
        if kind == "continuous":
            y = mu[cell] + hyper["sigma"] * rng.standard_normal(wi.size)
        else:
            y = rng.binomial(1, expit(mu[cell])).astype(float)
    elif spec.outcome_model == "mixture":
        comp = rng.choice(3, size=wi.size, p=[0.3, 0.4, 0.3])
        means = np.stack([0.5 * wi**2, 5.0 * np.log(wi), 5.0 - wi])
        y = means[comp, np.arange(wi.size)] + rng.standard_normal(wi.size)
        kind = "continuous"
    else:
        # second argument of the normal read as a variance
        logit = rng.normal(quadratic_logit_mean(wi), math.sqrt(10.0))
        y = rng.binomial(1, expit(logit)).astype(float)
        kind = "binary"
    if kind != spec.outcome_kind:
        spec = replace(spec, outcome_kind=kind)
    return Population(w0=wi, y=y, cell=cell, spec=spec, hyper=hyper or {}, mu=mu)


def mixture_component_means(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.stack([0.5 * w**2, 5.0 * np.log(w), 5.0 - w], axis=-1)


MIXTURE_WEIGHTS = (0.3, 0.4, 0.3)


def quadratic_logit_mean(w):
    return 2.0 - 4.0 * (np.log(w) + 0.4) ** 2


def pps_indices(w0, n: int, seed) -> np.ndarray:
    """Indices of n units drawn without replacement with probability proportional to 1/w0."""
    w0 = np.asarray(w0, dtype=float)
    if n > w0.size:
        raise InvalidInputError("sample size exceeds population size")
    rng = np.random.default_rng(seed)
    if n == w0.size:
        return np.arange(w0.size)
    p = 1.0 / w0
    return np.sort(rng.choice(w0.size, size=n, replace=False, p=p / p.sum()))


def draw_pps_sample(population: Population, n: int, seed) -> list[UnitRecord]:
    idx = pps_indices(population.w0, n, seed)
    return [UnitRecord(float(w), float(y)) for w, y in zip(population.w0[idx], population.y[idx])]


# ---------------------------------------------------------------------------
# reports


def interval_metrics(estimates, ses, lowers, uppers, truth) -> dict[str, float]:
    """Average SE, bias, RMSE and coverage for one estimator against a fixed truth."""
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        return {"avg_se": math.nan, "bias": math.nan, "rmse": math.nan, "coverage": math.nan}
    truth = np.broadcast_to(np.asarray(truth, dtype=float), est.shape)
    err = est - truth
    cover = (np.asarray(lowers) <= truth) & (truth <= np.asarray(uppers))
    return {
        "avg_se": math.fsum(ses) / est.size,
        "bias": math.fsum(err) / est.size,
        "rmse": math.sqrt(math.fsum(err**2) / est.size),
        "coverage": float(np.mean(cover)),
    }


@dataclass
class SimulationReport:
    """Per-replication records plus aggregate rows.

    ``aggregates`` has one dict per (estimator or parameter) row; ``cells``
    holds the per-population-cell comparison rows when available.
    """

    mode: str
    records: list[dict] = field(default_factory=list)
    aggregates: list[dict] = field(default_factory=list)
    cells: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    truth: float | None = None

    def aggregate(self, key: str) -> dict:
        for row in self.aggregates:
            if row.get("estimator", row.get("parameter")) == key:
                return row
        raise KeyError(key)

    def write(self, path) -> list[Path]:
        """Aggregate CSV at ``path`` plus ``*_replications.csv`` (and ``*_cells.csv``)."""
        path = Path(path)
        written = [path]
        _write_rows(path, self.aggregates)
        rep = path.with_name(path.stem + "_replications.csv")
        _write_rows(rep, self.records + self.failures)
        written.append(rep)
        if self.cells:
            cp = path.with_name(path.stem + "_cells.csv")
            _write_rows(cp, self.cells)
            written.append(cp)
        return written


def _write_rows(path: Path, rows: list[dict]) -> None:
    fields: list[str] = []
    for row in rows:
        for k in row:
            if k not in fields:
                fields.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _replication_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master, spawn_key=(index,))


def _map(fn, jobs, threads: int):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


# ---------------------------------------------------------------------------
# calibration check


COHERENCE_PARAMS = ("theta", "beta", "sigma", "tau", "ell", "delta")


def _coherence_replication(job) -> dict:
    index, master, J0, N_total, n, kind, fit_kind, sampler_cfg, truncate, exact = job
    ss = _replication_seed(master, index)
    pop_seed, sample_seed, fit_seed = ss.spawn(3)
    w0, N = coherence_cells(J0, N_total)
    spec = PopulationSpec(w0, N, "prior", kind)
    rng = np.random.default_rng(pop_seed)
    hyper = draw_prior_hyper(rng, kind, truncate=truncate)
    pop = generate_population(spec, hyper, seed=rng)
    idx = pps_indices(pop.w0, n, sample_seed)
    record = {"replication": index, "J": int(np.unique(pop.w0[idx]).size), "truth_theta": pop.truth}
    record.update({f"truth_{k}": v for k, v in hyper.items()})
    try:
        ct = CellTable.from_arrays(pop.w0[idx], pop.y[idx], fit_kind, normalize=False)
        model = BNFPModel(ct, ModelConfig(n_total=N_total, sigma_prior_scale=2.5))
        cfg = replace(sampler_cfg, seed=int(fit_seed.generate_state(1)[0]))
        draws = run_chains(model, cfg, exact_predictive=exact)
    except (SamplerError, np.linalg.LinAlgError, FloatingPointError) as exc:
        record.update({"failed": True, "error": str(exc)})
        return record
    record["failed"] = False
    record["divergences"] = int(draws.divergent.sum())
    truths = {"theta": pop.truth, **hyper} if fit_kind == kind else {"theta": pop.truth}
    for name in COHERENCE_PARAMS:
        if name not in truths:
            continue
        s = summarize_draws(draws.flat(name))
        record[f"mean_{name}"] = s.point
        record[f"sd_{name}"] = s.sd
        for level in INTERVAL_LEVELS:
            lo, hi = s.interval(level)
            record[f"cover{int(level * 100)}_{name}"] = bool(lo <= truths[name] <= hi)
    return record


def coherence_check(
    replications: int,
    sampler_cfg: SamplerConfig,
    *,
    outcome_kind: str = "continuous",
    J0: int = 10,
    N_total: int = 100_000,
    n: int = 500,
    seed: int = 0,
    truncate_prior: float | None = None,
    exact_predictive: bool = False,
    fit_outcome_kind: str | None = None,
) -> SimulationReport:
    """Coverage of central posterior intervals over prior-drawn replications.

    ``fit_outcome_kind`` fits a different outcome model than the one that
    generated the data (a negative control); only theta is then scored.
    """
    if replications < 1:
        raise InvalidInputError("replications must be >= 1")
    fit_kind = fit_outcome_kind or outcome_kind
    cfg = sampler_cfg.resolved(fit_kind)
    inner = replace(cfg, threads=1)
    jobs = [
        (r, seed, J0, N_total, n, outcome_kind, fit_kind, inner, truncate_prior, exact_predictive)
        for r in range(replications)
    ]
    rows = _map(_coherence_replication, jobs, cfg.threads)
    report = SimulationReport(mode="coherence")
    report.records = [r for r in rows if not r["failed"]]
    report.failures = [r for r in rows if r["failed"]]
    for name in COHERENCE_PARAMS:
        key = f"cover95_{name}"
        ok = [r for r in report.records if key in r]
        if not ok:
            continue
        row = {"parameter": name, "replications": len(ok), "failed": len(report.failures)}
        for level in INTERVAL_LEVELS:
            lvl = int(level * 100)
            row[f"coverage{lvl}"] = float(np.mean([r[f"cover{lvl}_{name}"] for r in ok]))
        report.aggregates.append(row)
    return report


# ---------------------------------------------------------------------------
# comparison study


def comparison_population(
    scenario: str,
    outcome_kind: str,
    N_total: int = 100_000,
    seed: int = 0,
    table=None,
) -> Population:
    if table is not None:
        w0, N = read_weight_table(table)
    else:
        w0, N = scenario_cells(scenario, N_total)
    model = "mixture" if outcome_kind == "continuous" else "quadratic_logit"
    return generate_population(PopulationSpec(w0, N, model, outcome_kind), seed=seed)


def _comparison_replication(job) -> dict:
    index, master, pop, n, sampler_cfg, exact = job
    ss = _replication_seed(master, index)
    sample_seed, fit_seed = ss.spawn(2)
    kind = pop.spec.outcome_kind
    idx = pps_indices(pop.w0, n, sample_seed)
    w, y, pcell = pop.w0[idx], pop.y[idx], pop.cell[idx]
    record = {"replication": index, "truth": pop.truth}
    cls = classical_from_arrays(w, y)
    lo, hi = normal_interval(cls, 0.95)
    record.update({"classical_estimate": cls.point, "classical_se": cls.sd, "classical_lo95": lo, "classical_hi95": hi})
    ct = CellTable.from_arrays(w, y, kind)
    # sample cells are sorted by weight, as are the distinct population cells they came from
    sample_cells = np.unique(pcell)
    record["J"] = ct.J
    cls_cells = []
    for j, pc in enumerate(sample_cells):
        yj = y[pcell == pc]
        se = float(np.std(yj, ddof=1) / math.sqrt(yj.size)) if yj.size > 1 else math.nan
        cls_cells.append((int(pc), float(yj.mean()), se))
    try:
        model = BNFPModel(ct, ModelConfig(n_total=pop.spec.N_total))
        cfg = replace(sampler_cfg, seed=int(fit_seed.generate_state(1)[0]))
        draws = run_chains(model, cfg, exact_predictive=exact)
    except (SamplerError, np.linalg.LinAlgError, FloatingPointError) as exc:
        record.update({"failed": True, "error": str(exc)})
        return record
    s = summarize_draws(draws.theta)
    blo, bhi = s.interval(0.95)
    record.update({
        "failed": False,
        "bnfp_estimate": s.point,
        "bnfp_se": s.sd,
        "bnfp_lo95": blo,
        "bnfp_hi95": bhi,
        "divergences": int(draws.divergent.sum()),
    })
    mu = draws.flat("mu")
    cell_mean = expit(mu) if kind == "binary" else mu
    record["_cells"] = [
        (pc, float(cell_mean[:, j].mean()), float(cell_mean[:, j].std(ddof=1)), cm, cse)
        for j, (pc, cm, cse) in enumerate(cls_cells)
    ]
    return record


def comparison_study(
    replications: int,
    scenario: str,
    sampler_cfg: SamplerConfig,
    *,
    outcome_kind: str = "continuous",
    n: int | None = None,
    N_total: int = 100_000,
    seed: int = 0,
    table=None,
    exact_predictive: bool = False,
) -> SimulationReport:
    """Model-based vs classical estimates over repeated PPS samples of one population."""
    if replications < 1:
        raise InvalidInputError("replications must be >= 1")
    if n is None:
        n = 1000 if outcome_kind == "continuous" else 200
    pop_seed = _replication_seed(seed, 2**31 - 1)
    pop = comparison_population(scenario, outcome_kind, N_total, pop_seed, table)
    cfg = sampler_cfg.resolved(outcome_kind)
    inner = replace(cfg, threads=1)
    jobs = [(r, seed, pop, n, inner, exact_predictive) for r in range(replications)]
    rows = _map(_comparison_replication, jobs, cfg.threads)
    truth = pop.truth
    report = SimulationReport(mode="compare", truth=truth)
    ok = [r for r in rows if not r["failed"]]
    report.failures = [r for r in rows if r["failed"]]
    for est in ("bnfp", "classical"):
        m = interval_metrics(
            [r[f"{est}_estimate"] for r in ok],
            [r[f"{est}_se"] for r in ok],
            [r[f"{est}_lo95"] for r in ok],
            [r[f"{est}_hi95"] for r in ok],
            truth,
        )
        report.aggregates.append({
            "estimator": est,
            "avg_se": m["avg_se"],
            "bias": m["bias"],
            "rmse": m["rmse"],
            "coverage95": m["coverage"],
            "replications": len(ok),
            "failed": len(report.failures),
        })
    report.cells = _cell_metrics(pop, ok)
    report.records = [{k: v for k, v in r.items() if k != "_cells"} for r in ok]
    return report


def _cell_metrics(pop: Population, rows: list[dict]) -> list[dict]:
    truth = pop.cell_means()
    w0_cells = np.asarray(pop.spec.w0, dtype=float)
    per_cell: dict[int, list] = {}
    for r in rows:
        for pc, bm, bsd, cm, cse in r["_cells"]:
            per_cell.setdefault(pc, []).append((bm, bsd, cm, cse))
    out = []
    for pc in sorted(per_cell):
        vals = np.asarray(per_cell[pc], dtype=float)
        t = truth[pc]
        row = {"cell": pc, "w0": float(w0_cells[pc]), "N": int(pop.spec.N[pc]), "truth": float(t), "times_sampled": len(vals)}
        for name, est_col, se_col in (("bnfp", 0, 1), ("classical", 2, 3)):
            err = vals[:, est_col] - t
            se = vals[:, se_col]
            finite = se[np.isfinite(se)]
            row[f"{name}_avg_se"] = float(finite.mean()) if finite.size else math.nan
            row[f"{name}_bias"] = float(err.mean())
            row[f"{name}_rmse"] = float(math.sqrt(np.mean(err**2)))
        out.append(row)
    return out
