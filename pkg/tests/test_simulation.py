import csv
import logging
import math

import numpy as np
import pytest
from scipy.special import expit

from bnfp.cells import InvalidInputError
from bnfp.sampler import SamplerConfig
from bnfp.simulation import (
    CASES,
    PopulationSpec,
    apportion,
    coherence_cells,
    coherence_check,
    comparison_population,
    comparison_study,
    draw_pps_sample,
    draw_prior_hyper,
    generate_population,
    interval_metrics,
    mixture_component_means,
    MIXTURE_WEIGHTS,
    pps_indices,
    quadratic_logit_mean,
    read_weight_table,
    scenario_cells,
)

TINY = SamplerConfig(chains=2, iter=60, warmup=60)


def test_mixture_at_unit_weight():
    np.testing.assert_allclose(mixture_component_means(1.0), [0.5, 0.0, 4.0], atol=1e-15)
    assert MIXTURE_WEIGHTS == (0.3, 0.4, 0.3)


def test_quadratic_logit_peak():
    m = quadratic_logit_mean(math.exp(-0.4))
    assert m == pytest.approx(2.0, abs=1e-15)
    assert expit(m) == pytest.approx(0.8807970779778823, rel=1e-15)


def test_population_sizes_and_models():
    spec = PopulationSpec(np.array([0.5, 1.0, 2.0]), np.array([300, 500, 200]), "mixture")
    pop = generate_population(spec, seed=1)
    assert pop.y.size == spec.N_total == 1000
    assert np.bincount(pop.cell).tolist() == [300, 500, 200]
    # cell means track the mixture mean within sampling error
    w = np.array([0.5, 1.0, 2.0])
    expected = mixture_component_means(w) @ np.array(MIXTURE_WEIGHTS)
    sd = np.sqrt(np.var(mixture_component_means(w), axis=1) * 0 + 10) / np.sqrt([300, 500, 200])
    assert np.all(np.abs(pop.cell_means() - expected) < 5 * sd)
    pop = generate_population(PopulationSpec(w, np.array([300, 500, 200]), "quadratic_logit", "binary"), seed=2)
    assert set(np.unique(pop.y)) <= {0.0, 1.0}
    assert pop.spec.outcome_kind == "binary"


def test_prior_mode_degenerate_kernel():
    spec = PopulationSpec(np.arange(1.0, 6.0), np.full(5, 20), "prior")
    hyper = {"beta": 1.7, "sigma": 0.5, "tau": 1e-9, "ell": 1.0, "delta": 1.0}
    pop = generate_population(spec, hyper, seed=3)
    np.testing.assert_allclose(pop.mu, 1.7 * np.log(np.arange(1.0, 6.0)), atol=1e-7)


def test_prior_mode_draws_hyper(caplog):
    spec = PopulationSpec(np.arange(1.0, 11.0), np.full(10, 10), "prior", "binary")
    pop = generate_population(spec, seed=4)
    assert set(pop.hyper) == {"beta", "tau", "ell", "delta"}
    assert np.all(np.isfinite(pop.mu))


def test_prior_draws():
    rng = np.random.default_rng(5)
    draws = [draw_prior_hyper(rng, "continuous") for _ in range(4000)]
    tau = np.array([d["tau"] for d in draws])
    delta = np.array([d["delta"] for d in draws])
    # half-Cauchy median equals its scale
    assert np.median(tau) == pytest.approx(2.5, rel=0.1)
    assert 0 <= delta.min() and delta.max() <= 1
    capped = [draw_prior_hyper(rng, "binary", truncate=2.0)["ell"] for _ in range(500)]
    assert max(capped) <= 5.0


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        PopulationSpec(np.array([1.0, -1.0]), np.array([1, 1]), "mixture")
    with pytest.raises(InvalidInputError):
        PopulationSpec(np.array([1.0]), np.array([1]), "poisson")


# ---------------------------------------------------------------------------
# PPS sampling


def test_pps_equal_weights_is_srs():
    N, n, reps = 20, 5, 2000
    counts = np.zeros(N)
    for s in range(reps):
        counts[pps_indices(np.ones(N), n, s)] += 1
    p = n / N
    sd = math.sqrt(p * (1 - p) / reps)
    assert np.all(np.abs(counts / reps - p) <= 3 * sd)


def test_pps_inclusion_ratio():
    w0 = np.repeat([1.0, 2.0], 500)
    hits = np.zeros(2)
    for s in range(2000):
        idx = pps_indices(w0, 20, s)
        hits += np.bincount((w0[idx] == 2.0).astype(int), minlength=2)
    assert hits[0] / hits[1] == pytest.approx(2.0, rel=0.05)


def test_pps_scenario_inclusion_matches_independent_model():
    w0, N = scenario_cells("case2", 5000)
    units = np.repeat(w0, N)
    n, reps = 50, 2000
    hits = np.zeros(w0.size)
    cell = np.repeat(np.arange(w0.size), N)
    for s in range(reps):
        hits += np.bincount(cell[pps_indices(units, n, s)], minlength=w0.size)
    expected = n * (N / w0) / np.sum(N / w0) * reps
    sd = np.sqrt(expected)
    assert np.all(np.abs(hits - expected) <= 4 * sd + 1)


def test_pps_full_and_deterministic():
    spec = PopulationSpec(np.array([1.0, 3.0]), np.array([4, 6]), "mixture")
    pop = generate_population(spec, seed=0)
    assert len(draw_pps_sample(pop, 10, 0)) == 10
    assert sorted(r.outcome for r in draw_pps_sample(pop, 10, 0)) == sorted(pop.y)
    assert draw_pps_sample(pop, 4, 7) == draw_pps_sample(pop, 4, 7)
    with pytest.raises(InvalidInputError):
        draw_pps_sample(pop, 11, 0)


# ---------------------------------------------------------------------------
# scenarios and metrics


@pytest.mark.parametrize("case", sorted(CASES))
def test_scenarios(case):
    J0, lo, hi = CASES[case]
    w, N = scenario_cells(case, 100_000)
    assert w.size == J0 and N.sum() == 100_000 and N.min() >= 1
    assert np.all(np.diff(w) > 0)
    assert w[0] == pytest.approx(lo, rel=1e-3) and w[-1] == pytest.approx(hi, rel=1e-3)
    assert np.sum(N) / np.sum(N / w) == pytest.approx(1.0, rel=1e-12)


def test_apportion():
    N = apportion(10, [1.0, 1.0, 1.0])
    assert N.sum() == 10 and N.min() >= 3
    assert apportion(5, [1e-9, 1.0]).tolist() == [1, 4]


def test_weight_table(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("weight,count\n2,100\n4,50\n")
    w, N = read_weight_table(p)
    assert N.tolist() == [100, 50]
    assert np.sum(N) / np.sum(N / w) == pytest.approx(1.0)
    p.write_text("weight,count\n2,x\n")
    with pytest.raises(InvalidInputError, match=":2:"):
        read_weight_table(p)


def test_metrics_perfect_estimator():
    m = interval_metrics([1.5] * 10, [0.1] * 10, [1.4] * 10, [1.6] * 10, 1.5)
    assert m == {"avg_se": pytest.approx(0.1), "bias": 0.0, "rmse": 0.0, "coverage": 1.0}


def test_metrics_decomposition():
    rng = np.random.default_rng(6)
    est = rng.normal(2.0, 0.3, size=100)
    m = interval_metrics(est, np.full(100, 0.3), est - 0.5, est + 0.5, 1.9)
    assert m["rmse"] ** 2 == pytest.approx(m["bias"] ** 2 + np.var(est), abs=1e-10)
    assert 0 <= m["coverage"] <= 1
    assert m["rmse"] ** 2 >= m["bias"] ** 2 - 1e-12


# ---------------------------------------------------------------------------
# harnesses (tiny runs; the full-size versions live in the acceptance suite)


def test_coherence_requires_replications():
    with pytest.raises(InvalidInputError):
        coherence_check(0, TINY)
    with pytest.raises(InvalidInputError):
        comparison_study(0, "case1", TINY)


def test_coherence_small(tmp_path):
    rep = coherence_check(2, TINY, N_total=1000, n=60, J0=5, seed=1)
    assert len(rep.records) + len(rep.failures) == 2
    row = rep.aggregate("theta")
    assert {"coverage50", "coverage80", "coverage95"} <= set(row)
    assert {r["parameter"] for r in rep.aggregates} <= {"theta", "beta", "sigma", "tau", "ell", "delta"}
    paths = rep.write(tmp_path / "coh.csv")
    assert [p.name for p in paths] == ["coh.csv", "coh_replications.csv"]


def test_comparison_small(tmp_path):
    rep = comparison_study(2, "case1", TINY, outcome_kind="continuous", n=100, N_total=3000, seed=2)
    assert [r["estimator"] for r in rep.aggregates] == ["bnfp", "classical"]
    assert {r["truth"] for r in rep.records} == {rep.truth}
    pop = comparison_population("case1", "continuous", 3000, np.random.SeedSequence(entropy=2, spawn_key=(2**31 - 1,)))
    assert rep.truth == pop.truth
    assert rep.cells and {"bnfp_rmse", "classical_rmse", "times_sampled"} <= set(rep.cells[0])
    paths = rep.write(tmp_path / "cmp.csv")
    with open(paths[0]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and {"avg_se", "bias", "rmse", "coverage95"} <= set(rows[0])
    assert paths[2].name == "cmp_cells.csv"


def test_comparison_reproducible():
    a = comparison_study(1, "case1", TINY, n=60, N_total=2000, seed=3)
    b = comparison_study(1, "case1", TINY, n=60, N_total=2000, seed=3)
    assert a.records == b.records


def test_coherence_misspecified_fit():
    rep = coherence_check(1, TINY, outcome_kind="binary", fit_outcome_kind="continuous", N_total=1000, n=60, J0=5, seed=3)
    assert {r["parameter"] for r in rep.aggregates} == {"theta"}
