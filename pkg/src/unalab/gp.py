"""Exact zero-mean Gaussian process regression with sum-of-terms kernels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from .blr import PredictiveDist
from .numkit import NotPositiveDefinite, RngStream, cho_solve, cholesky, logdet_from_cholesky

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class RBF:
    amplitude: float = 1.0
    length_scale: float = 1.0


@dataclass(frozen=True)
class Matern52:
    amplitude: float = 1.0
    length_scale: float = 1.0


@dataclass(frozen=True)
class White:
    noise_level: float = 1e-5


Term = Union[RBF, Matern52, White]


@dataclass(frozen=True)
class KernelSpec:
    terms: tuple[Term, ...]

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("a kernel needs at least one term")
        for t in terms:
            vals = [t.noise_level] if isinstance(t, White) else [t.amplitude, t.length_scale]
            if not all(v > 0 for v in vals):
                raise ValueError(f"kernel hyperparameters must be positive: {t}")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def of(cls, *terms: Term) -> "KernelSpec":
        return cls(tuple(terms))

    @property
    def white_level(self) -> float:
        return sum(t.noise_level for t in self.terms if isinstance(t, White))

    def latent(self) -> "KernelSpec | None":
        """The kernel without its White terms (``None`` if nothing is left)."""
        rest = tuple(t for t in self.terms if not isinstance(t, White))
        return KernelSpec(rest) if rest else None

    def prior_var(self) -> float:
        return sum(t.amplitude**2 for t in self.terms if not isinstance(t, White))

    def to_dict(self) -> list[dict]:
        out = []
        for t in self.terms:
            d = {"type": type(t).__name__}
            d.update(t.__dict__)
            out.append(d)
        return out

    @classmethod
    def from_dict(cls, items: Sequence[dict]) -> "KernelSpec":
        kinds = {"RBF": RBF, "Matern52": Matern52, "White": White}
        terms = []
        for item in items:
            item = dict(item)
            terms.append(kinds[item.pop("type")](**item))
        return cls(tuple(terms))


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def kernel_matrix(spec: KernelSpec, X, X2) -> np.ndarray:
    """Covariance matrix between the rows of ``X`` and ``X2``.

    RBF: ``a^2 exp(-r^2 / (2 l^2))``.  Matern52:
    ``a^2 (1 + sqrt5 r/l + 5 r^2/(3 l^2)) exp(-sqrt5 r/l)``.  White adds its
    level only where two rows are exactly equal.
    """
    X, X2 = _as_2d(X), _as_2d(X2)
    if X.shape[1] != X2.shape[1]:
        raise ValueError("input dimensions differ")
    K = np.zeros((len(X), len(X2)))
    sq = None
    for t in spec.terms:
        if isinstance(t, White):
            same = np.all(X[:, None, :] == X2[None, :, :], axis=2)
            K += t.noise_level * same
            continue
        if sq is None:
            sq = np.maximum(cdist(X, X2, "sqeuclidean"), 0.0)
        if isinstance(t, RBF):
            K += t.amplitude**2 * np.exp(-0.5 * sq / t.length_scale**2)
        else:
            s = np.sqrt(5.0 * sq) / t.length_scale
            K += t.amplitude**2 * (1.0 + s + s * s / 3.0) * np.exp(-s)
    return K


@dataclass(frozen=True)
class GpPosterior:
    X: np.ndarray
    y: np.ndarray
    spec: KernelSpec
    noise_var: float
    chol: np.ndarray  # of K + noise_var I
    weights: np.ndarray  # (K + noise_var I)^{-1} y


def gp_fit(X, y, spec: KernelSpec, noise_var: float) -> GpPosterior:
    X = _as_2d(X)
    y = np.asarray(y, dtype=float)
    if len(X) < 1:
        raise ValueError("a GP needs at least one training point")
    if noise_var < 0:
        raise ValueError("noise variance must be non-negative")
    K = kernel_matrix(spec, X, X) + noise_var * np.eye(len(X))
    low = cholesky(K)
    return GpPosterior(X, y, spec, float(noise_var), low, cho_solve(low, y))


def gp_predict(post: GpPosterior, X_star) -> PredictiveDist:
    """Posterior of the latent function; White terms count as observation noise.

    ``var_epistemic`` is ``k_D(x, x)``; ``var_total`` adds ``noise_var`` and
    the White levels.
    """
    X_star = _as_2d(X_star)
    latent = post.spec.latent()
    obs_noise = post.noise_var + post.spec.white_level
    if latent is None:
        zeros = np.zeros(len(X_star))
        return PredictiveDist(zeros, zeros + obs_noise, zeros)
    Ks = kernel_matrix(latent, post.X, X_star)
    mean = Ks.T @ post.weights
    v = solve_triangular(post.chol, Ks, lower=True, check_finite=False)
    epi = latent.prior_var() - np.sum(v * v, axis=0)
    epi = np.maximum(epi, 0.0)
    return PredictiveDist(mean, epi + obs_noise, epi)


def gp_log_marginal(X, y, spec: KernelSpec, noise_var: float) -> float:
    post = gp_fit(X, y, spec, noise_var)
    return log_marginal_from_posterior(post)


def log_marginal_from_posterior(post: GpPosterior) -> float:
    n = len(post.y)
    return float(
        -0.5 * post.y @ post.weights
        - 0.5 * logdet_from_cholesky(post.chol)
        - 0.5 * n * _LOG_2PI
    )


def gp_prior_sample(spec: KernelSpec, X_grid, n_draws: int, stream: RngStream) -> np.ndarray:
    """``n_draws`` independent prior function draws on the grid, shape (I, M)."""
    X_grid = _as_2d(X_grid)
    if len(X_grid) < 1 or n_draws < 1:
        raise ValueError("need at least one grid point and one draw")
    K = kernel_matrix(spec, X_grid, X_grid)
    low = cholesky(K + 1e-9 * np.mean(np.diag(K)) * np.eye(len(K)))
    return low @ stream.standard_normal((len(X_grid), n_draws))


def gp_grid_search(X, y, candidates: Sequence[KernelSpec], noise_var: float) -> KernelSpec:
    """Candidate with the highest log marginal likelihood (first wins ties)."""
    if not candidates:
        raise ValueError("no candidate kernels")
    best, best_val = None, -np.inf
    for spec in candidates:
        try:
            val = gp_log_marginal(X, y, spec, noise_var)
        except NotPositiveDefinite:
            continue
        if best is None or val > best_val:
            best, best_val = spec, val
    if best is None:
        raise NotPositiveDefinite("every candidate kernel failed to factorize")
    return best
