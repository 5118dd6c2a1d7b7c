import math

import numpy as np
import pytest
from scipy.stats import kstest

from bnfp.cells import CellTable
from bnfp.model import BNFPModel, ModelConfig
from bnfp.sampler import (
    DualAveraging,
    Hamiltonian,
    SamplerConfig,
    SamplerError,
    _Point,
    chain_rng,
    run_chains,
    sample,
    warmup_windows,
)

from targets import Gaussian, correlated_gaussian


def stacked(results):
    return np.concatenate([r.draws for r in results])


def test_config_defaults_and_validation():
    c = SamplerConfig()
    assert (c.chains, c.max_leapfrog, c.target_accept) == (3, 1024, 0.8)
    assert c.resolved("continuous").iter == 3000 and c.resolved("continuous").warmup == 3000
    assert c.resolved("binary").iter == 6000 and c.resolved("binary").warmup == 6000
    assert SamplerConfig(iter=10).resolved().warmup == 10
    for bad in [dict(chains=0), dict(iter=0), dict(target_accept=1.0), dict(algorithm="mh"), dict(warmup=-1)]:
        with pytest.raises(ValueError):
            SamplerConfig(**bad)


def test_warmup_windows():
    ends = warmup_windows(1000)
    assert ends[-1] == 950
    assert ends[0] == 75 + 25
    widths = np.diff([75] + ends)
    assert np.all(widths[1:-1] == 2 * widths[:-2])
    small = warmup_windows(100)
    assert small and small[-1] <= 90


def test_dual_averaging_converges_to_target():
    # acceptance falls with the step size as exp(-eps); the fixed point is eps = -log(0.8)
    da = DualAveraging(1.0, 0.8)
    eps = 1.0
    for _ in range(3000):
        eps = da.update(math.exp(-eps))
    assert da.final == pytest.approx(-math.log(0.8), rel=0.05)


def test_energy_conservation():
    target = Gaussian(np.zeros(2), np.eye(2))
    h = Hamiltonian(target, np.ones(2))
    lp, g = target(np.array([0.7, -1.1]))
    pt = _Point(np.array([0.7, -1.1]), np.array([0.4, 0.9]), lp, g)
    H0 = h.energy(pt)
    for _ in range(1000):
        pt = h.leapfrog(pt, 1e-4)
    assert abs(h.energy(pt) - H0) <= 1e-4 * abs(H0)


def test_chain_streams_depend_only_on_seed_and_index():
    a = chain_rng(42, 1).standard_normal(5)
    b = chain_rng(42, 1).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, chain_rng(42, 0).standard_normal(5))
    target = Gaussian(np.zeros(3), np.eye(3))
    two = sample(target, 3, SamplerConfig(chains=2, iter=50, warmup=50, seed=3))
    three = sample(target, 3, SamplerConfig(chains=3, iter=50, warmup=50, seed=3))
    assert np.array_equal(two[1].draws, three[1].draws)


def test_determinism():
    target = correlated_gaussian(4)
    cfg = SamplerConfig(chains=2, iter=100, warmup=100, seed=9)
    a, b = sample(target, 4, cfg), sample(target, 4, cfg)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.draws, rb.draws)


@pytest.mark.parametrize("algorithm", ["nuts", "hmc"])
def test_two_dim_normal(algorithm):
    target = Gaussian(np.array([1.0, -2.0]), np.array([[1.0, 0.5], [0.5, 2.0]]))
    res = sample(target, 2, SamplerConfig(chains=4, iter=2500, warmup=500, seed=1, algorithm=algorithm))
    x = stacked(res)
    assert np.max(np.abs(x.mean(0) - target.mean)) < 0.05
    assert np.max(np.abs(np.cov(x.T) - target.cov)) < 0.1


def test_one_dim_ks():
    target = Gaussian(np.zeros(1), np.eye(1))
    x = stacked(sample(target, 1, SamplerConfig(chains=2, iter=5000, warmup=500, seed=2)))[:, 0]
    assert kstest(x, "norm").statistic < 0.02


def test_initialization_failure():
    def nowhere(x):
        return -math.inf, np.zeros_like(x)

    with pytest.raises(SamplerError, match="initializations"):
        sample(nowhere, 2, SamplerConfig(chains=1, iter=5, warmup=5))


def test_divergence_failure_reports():
    # a funnel-like cliff: the density is -inf on half the space
    def cliff(x):
        if x[0] > 0.05:
            return -1e6 * x[0] ** 2, -2e6 * x[0] * np.eye(1)[0]
        return -0.5 * float(x @ x), -x

    with pytest.raises(SamplerError) as exc:
        sample(cliff, 1, SamplerConfig(chains=1, iter=200, warmup=0, seed=0, max_divergence_rate=0.0))
    assert exc.value.report["divergences"] > 0


def test_run_chains_shapes_and_invariants():
    rng = np.random.default_rng(0)
    w = np.repeat([0.5, 1.0, 2.0], 12)
    ct = CellTable.from_arrays(w, rng.normal(np.log(w), 1.0), "continuous")
    model = BNFPModel(ct, ModelConfig(n_total=1e4))
    d = run_chains(model, SamplerConfig(chains=2, iter=150, warmup=150, seed=4))
    assert d.theta.shape == (2, 150)
    assert d.params["mu"].shape == (2, 150, 3)
    assert np.allclose(d.params["q"].sum(-1), 1.0)
    assert np.all(d.params["q"] > 0)
    assert np.all(d.params["sigma"] > 0) and np.all((d.params["delta"] >= 0) & (d.params["delta"] <= 1))
    assert d.flat("mu").shape == (300, 3)
    assert d.scalar_names == ["beta", "sigma", "tau", "ell", "delta", "theta"]
    d2 = run_chains(model, SamplerConfig(chains=2, iter=150, warmup=150, seed=4))
    assert np.array_equal(d.theta, d2.theta)


def test_pure_nugget_decorrelates_cells():
    rng = np.random.default_rng(1)
    w = np.repeat([0.5, 0.8, 1.3, 2.0], 5)
    ct = CellTable.from_arrays(w, rng.normal(0, 1, size=w.size), "continuous")
    fixed = {"beta": 0.2, "tau": 1.0, "ell": 1.0, "delta": 1.0}
    model = BNFPModel(ct, ModelConfig(n_total=1e4, parameterization="centered", fixed=fixed))
    d = run_chains(model, SamplerConfig(chains=2, iter=2000, warmup=500, seed=5))
    corr = np.corrcoef(d.flat("mu").T)
    off = corr[~np.eye(4, dtype=bool)]
    assert np.max(np.abs(off)) <= 0.1


def test_parallel_chains_match_serial():
    target = correlated_gaussian(3, seed=2)
    a = sample(target, 3, SamplerConfig(chains=2, iter=50, warmup=50, seed=11, threads=1))
    b = sample(target, 3, SamplerConfig(chains=2, iter=50, warmup=50, seed=11, threads=2))
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.draws, rb.draws)
