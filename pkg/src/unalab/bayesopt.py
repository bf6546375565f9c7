"""Bayesian optimisation with expected improvement over pluggable surrogates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.stats import norm

from .blr import PredictiveDist
from .gp import KernelSpec, Matern52, gp_fit, gp_grid_search, gp_predict
from .numkit import RngStream

log = logging.getLogger(__name__)


# -- objectives ------------------------------------------------------------------


def branin(x) -> float:
    x1, x2 = np.asarray(x, dtype=float)
    b = 5.1 / (4.0 * np.pi**2)
    c = 5.0 / np.pi
    t = 1.0 / (8.0 * np.pi)
    return float((x2 - b * x1**2 + c * x1 - 6.0) ** 2 + 10.0 * (1.0 - t) * np.cos(x1) + 10.0)


HARTMANN6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
HARTMANN6_A = np.array([
    [10, 3, 17, 3.50, 1.7, 8],
    [0.05, 10, 17, 0.1, 8, 14],
    [3, 3.5, 1.7, 10, 17, 8],
    [17, 8, 0.05, 10, 0.1, 14],
])
HARTMANN6_P = 1e-4 * np.array([
    [1312, 1696, 5569, 124, 8283, 5886],
    [2329, 4135, 8307, 3736, 1004, 9991],
    [2348, 1451, 3522, 2883, 3047, 6650],
    [4047, 8828, 8732, 5743, 1091, 381],
])
HARTMANN6_XSTAR = np.array([0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573])
BRANIN_MIN = 0.397887
HARTMANN6_MIN = -3.32237


def hartmann6(x) -> float:
    x = np.asarray(x, dtype=float)
    inner = np.sum(HARTMANN6_A * (x[None, :] - HARTMANN6_P) ** 2, axis=1)
    return float(-HARTMANN6_ALPHA @ np.exp(-inner))


@dataclass(frozen=True)
class ObjectiveSpec:
    name: str
    bounds: np.ndarray  # (D, 2) rows of (lo, hi)
    fn: Callable[[np.ndarray], float]
    optimum: float | None = None

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.ndim != 2 or b.shape[1] != 2 or np.any(b[:, 0] >= b[:, 1]):
            raise ValueError("bounds must be (D, 2) with lo < hi")
        object.__setattr__(self, "bounds", b)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def __call__(self, x) -> float:
        return float(self.fn(x))


OBJECTIVES = {
    "branin": ObjectiveSpec("branin", np.array([[-5.0, 10.0], [0.0, 15.0]]), branin, BRANIN_MIN),
    "hartmann6": ObjectiveSpec("hartmann6", np.tile([0.0, 1.0], (6, 1)), hartmann6, HARTMANN6_MIN),
}


# -- acquisition -------------------------------------------------------------------


def expected_improvement(mu, sigma, f_best):
    """Minimisation EI; the ``sigma = 0`` limit is ``max(f_best - mu, 0)``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    imp = f_best - mu
    safe = np.where(sigma > 0, sigma, 1.0)
    with np.errstate(over="ignore", divide="ignore"):
        z = imp / safe
        ei = imp * norm.cdf(z) + safe * norm.pdf(z)
    out = np.where(sigma > 0, np.maximum(ei, 0.0), np.maximum(imp, 0.0))
    return out if out.ndim else float(out)


def uniform_in(bounds, n: int, stream: RngStream) -> np.ndarray:
    lo, hi = bounds[:, 0], bounds[:, 1]
    return lo + (hi - lo) * stream.uniform(size=(n, len(bounds)))


def propose_next(predict: Callable[[np.ndarray], PredictiveDist], bounds, f_best: float,
                 stream: RngStream, n_candidates: int = 2000) -> np.ndarray:
    """Argmax of EI over uniform candidates (lowest index wins ties)."""
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    cand = uniform_in(np.asarray(bounds, dtype=float), n_candidates, stream)
    dist = predict(cand)
    ei = expected_improvement(dist.mean, dist.std_epistemic, f_best)
    return cand[int(np.argmax(ei))]


# -- surrogates --------------------------------------------------------------------


class Surrogate(Protocol):
    def fit(self, X: np.ndarray, y: np.ndarray, stream: RngStream) -> Callable: ...


@dataclass
class GpSurrogate:
    """Matern-5/2 GP on normalised observations; length scale picked by evidence.

    With ``refit_hypers`` (default) the length scale is re-selected on every
    refit; otherwise the first choice is kept.
    """

    length_scales: Sequence[float] = (0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0)
    noise_var: float = 1e-6
    refit_hypers: bool = True
    _spec: KernelSpec | None = field(default=None, init=False, repr=False)

    def fit(self, X, y, stream):
        if self._spec is None or self.refit_hypers:
            cands = [KernelSpec.of(Matern52(1.0, ls)) for ls in self.length_scales]
            self._spec = gp_grid_search(X, y, cands, self.noise_var)
        post = gp_fit(X, y, self._spec, self.noise_var)
        return lambda Xs: gp_predict(post, Xs)


@dataclass
class ModelSurrogate:
    """Adapter for any ``train(dataset, stream) -> predict`` pair from the model registry."""

    fit_fn: Callable

    def fit(self, X, y, stream):
        from .bench import Dataset
        return self.fit_fn(Dataset(X, y), stream)


@dataclass
class BoResult:
    X: np.ndarray
    f: np.ndarray
    best_error: np.ndarray  # running best (minus optimum) after each observation
    n_init: int
    seed: int | None = None

    @property
    def steps(self) -> int:
        return len(self.f) - self.n_init

    @property
    def final_error(self) -> float:
        return float(self.best_error[-1])


def bayesopt_loop(objective: ObjectiveSpec, surrogate: Surrogate, n_init: int, steps: int,
                  stream: RngStream, n_candidates: int = 2000) -> BoResult:
    """Minimise ``objective``; inputs are mapped to the unit cube and targets z-scored."""
    if n_init < 1 or steps < 0:
        raise ValueError("need n_init >= 1 and steps >= 0")
    bounds = objective.bounds
    lo, span = bounds[:, 0], bounds[:, 1] - bounds[:, 0]
    unit = np.tile([0.0, 1.0], (objective.dim, 1))
    U = uniform_in(unit, n_init, stream.split(0))
    f = [objective(lo + span * u) for u in U]
    U = list(U)
    prop = stream.split(1)
    for step in range(steps):
        fa = np.array(f)
        mean, sd = fa.mean(), fa.std()
        sd = sd if sd > 0 else 1.0
        try:
            predict = surrogate.fit(np.array(U), (fa - mean) / sd, stream.split(2 + step))
        except Exception as exc:
            log.error("surrogate failed at step %d: %s", step, exc)
            break
        u = propose_next(predict, unit, (fa.min() - mean) / sd, prop, n_candidates)
        U.append(u)
        f.append(objective(lo + span * u))
    X = lo + span * np.array(U)
    fa = np.array(f)
    best = np.minimum.accumulate(fa)
    err = best - objective.optimum if objective.optimum is not None else best
    return BoResult(X, fa, err, n_init, stream.seed)
