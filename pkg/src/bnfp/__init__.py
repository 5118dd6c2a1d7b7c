"""Bayesian nonparametric finite-population estimation from survey weights."""

__version__ = "0.1.0"
