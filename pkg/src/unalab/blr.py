"""Conjugate Bayesian linear regression over an arbitrary design matrix.

Model: ``y ~ N(Phi w, noise_var I)``, ``w ~ N(0, prior_var I)``.  All
solves go through the Cholesky factor of the posterior precision
``A = I / prior_var + Phi^T Phi / noise_var``; no explicit inverse is
formed except for the (small) posterior covariance that callers read.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .numkit import cho_solve, cholesky, logdet_from_cholesky

MIN_NOISE_VAR = 1e-12
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PredictiveDist:
    """Per-point Gaussian predictive: mean, total and epistemic variance."""

    mean: np.ndarray
    var_total: np.ndarray
    var_epistemic: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "var_total", np.asarray(self.var_total, dtype=float))
        epi = np.asarray(self.var_epistemic, dtype=float)
        object.__setattr__(self, "var_epistemic", np.maximum(epi, 0.0))

    @property
    def std_total(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.var_total, 0.0))

    @property
    def std_epistemic(self) -> np.ndarray:
        return np.sqrt(self.var_epistemic)

    def __len__(self):
        return len(self.mean)


@dataclass(frozen=True)
class BlrPosterior:
    mean: np.ndarray  # w_N
    cov: np.ndarray  # V_N
    prior_var: float
    noise_var: float
    prec_chol: np.ndarray  # lower Cholesky factor of V_N^{-1}

    @property
    def n_features(self) -> int:
        return len(self.mean)


def _check_hypers(prior_var, noise_var):
    if not prior_var > 0:
        raise ValueError(f"prior variance must be positive, got {prior_var}")
    if not noise_var >= MIN_NOISE_VAR:
        raise ValueError(f"noise variance must be >= {MIN_NOISE_VAR}, got {noise_var}")


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("inputs contain non-finite values")


def _precision(Phi, prior_var, noise_var):
    p = Phi.shape[1]
    return np.eye(p) / prior_var + Phi.T @ Phi / noise_var


def fit_blr(Phi, y, prior_var: float, noise_var: float) -> BlrPosterior:
    """Exact Gaussian posterior over the weights.  ``N = 0`` gives the prior."""
    Phi = np.asarray(Phi, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_hypers(prior_var, noise_var)
    _check_finite(Phi, y)
    if Phi.ndim != 2 or len(y) != Phi.shape[0]:
        raise ValueError(f"Phi {Phi.shape} does not match y {y.shape}")
    low = cholesky(_precision(Phi, prior_var, noise_var))
    mean = cho_solve(low, Phi.T @ y / noise_var)
    inv_low = solve_triangular(low, np.eye(low.shape[0]), lower=True)
    cov = inv_low.T @ inv_low
    return BlrPosterior(mean, cov, float(prior_var), float(noise_var), low)


def predict_blr(post: BlrPosterior, Phi_star) -> PredictiveDist:
    Phi_star = np.asarray(Phi_star, dtype=float)
    if Phi_star.ndim != 2 or Phi_star.shape[1] != post.n_features:
        raise ValueError(
            f"query features {Phi_star.shape} do not match {post.n_features} columns"
        )
    mean = Phi_star @ post.mean
    v = solve_triangular(post.prec_chol, Phi_star.T, lower=True, check_finite=False)
    epi = np.maximum(np.sum(v * v, axis=0), 0.0)
    return PredictiveDist(mean, post.noise_var + epi, epi)


def log_marginal(Phi, y, prior_var: float, noise_var: float) -> float:
    """log N(y; 0, prior_var Phi Phi^T + noise_var I) in feature-space form."""
    return log_marginal_and_grad(Phi, y, prior_var, noise_var, grad=False)[0]


def log_marginal_and_grad(Phi, y, prior_var, noise_var, grad: bool = True):
    """Log evidence and its gradient with respect to ``Phi``.

    With ``r = y - Phi w_N`` the gradient is ``(r w_N^T - Phi V_N) / noise_var``.
    """
    Phi = np.asarray(Phi, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_hypers(prior_var, noise_var)
    _check_finite(Phi, y)
    n, p = Phi.shape
    if n == 0:
        return 0.0, (np.zeros_like(Phi) if grad else None)
    low = cholesky(_precision(Phi, prior_var, noise_var))
    b = Phi.T @ y / noise_var
    w = cho_solve(low, b)
    quad = float(y @ y) / noise_var - float(b @ w)
    value = -0.5 * (
        n * _LOG_2PI
        + n * np.log(noise_var)
        + p * np.log(prior_var)
        + logdet_from_cholesky(low)
        + quad
    )
    if not grad:
        return float(value), None
    resid = y - Phi @ w
    Phi_V = cho_solve(low, Phi.T).T
    return float(value), (np.outer(resid, w) - Phi_V) / noise_var


def avg_log_likelihood(dist: PredictiveDist, y) -> float:
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("empty input")
    if len(y) != len(dist):
        raise ValueError("length mismatch")
    var = dist.var_total
    return float(np.mean(-0.5 * (_LOG_2PI + np.log(var) + (y - dist.mean) ** 2 / var)))


def rmse(dist: PredictiveDist, y) -> float:
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("empty input")
    if len(y) != len(dist):
        raise ValueError("length mismatch")
    return float(np.sqrt(np.mean((y - dist.mean) ** 2)))
