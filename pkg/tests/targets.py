"""Known target densities for the sampler tests (module level so they pickle)."""

import numpy as np


class Gaussian:
    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.prec = np.linalg.inv(self.cov)

    def __call__(self, x):
        r = x - self.mean
        g = -self.prec @ r
        return 0.5 * float(r @ g), g


def correlated_gaussian(dim, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(dim, dim))
    cov = A @ A.T / dim + np.diag(rng.uniform(0.2, 2.0, size=dim))
    scale = np.diag(rng.uniform(0.5, 3.0, size=dim))
    return Gaussian(rng.normal(size=dim), scale @ cov @ scale)
