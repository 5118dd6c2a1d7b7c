import math

import numpy as np
import pytest

from bnfp.diagnostics import effective_sample_size, split_rhat


def ar1(rng, chains, n, rho):
    x = np.empty((chains, n))
    x[:, 0] = rng.standard_normal(chains)
    e = rng.standard_normal((chains, n)) * math.sqrt(1 - rho**2)
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + e[:, t]
    return x


def test_rhat_same_distribution():
    # the classic estimator can dip just below one by sampling noise
    stream = np.random.default_rng(0).standard_normal(10000)
    assert 0.999 <= split_rhat(stream.reshape(2, 5000)) <= 1.02


def test_rhat_offset_chains():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 1000))
    x[1] += 5.0
    assert split_rhat(x) > 1.5


def test_rhat_detects_trend_within_chain():
    x = np.tile(np.linspace(-3, 3, 1000), (2, 1)) + np.random.default_rng(2).standard_normal((2, 1000)) * 0.1
    assert split_rhat(x) > 1.5


def test_constant_is_not_applicable():
    assert math.isnan(split_rhat(np.ones((3, 100))))
    assert math.isnan(effective_sample_size(np.ones((3, 100))))


def test_too_few_draws():
    with pytest.raises(ValueError):
        split_rhat(np.zeros((2, 3)))


def test_ess_iid():
    ess = effective_sample_size(np.random.default_rng(3).standard_normal((4, 1000)))
    assert 3200 <= ess <= 4400


def test_ess_capped():
    # antithetic draws would give ESS above the draw count
    x = np.random.default_rng(4).standard_normal((4, 1000))
    x[:, 1::2] = -x[:, ::2]
    assert effective_sample_size(x) <= 4000


@pytest.mark.parametrize("rho", [0.5, 0.9])
def test_ess_ar1(rho):
    x = ar1(np.random.default_rng(5), 4, 5000, rho)
    expected = x.size * (1 - rho) / (1 + rho)
    ess = effective_sample_size(x)
    assert expected / 1.5 <= ess <= expected * 1.5
