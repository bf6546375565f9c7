"""Bayesian deep-regression lab: neural linear models, UNA training and baselines."""

__version__ = "0.1.0"
