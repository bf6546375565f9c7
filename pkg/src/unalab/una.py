"""UNA training: LUNA (diverse auxiliary regressors) and TUNA (reference functions).

Both variants train a shared feature body together with ``M`` auxiliary
linear heads, then throw the heads away and fit a Bayesian linear head on
the learned features.  Heads are stored as one ``(L + 1, M)`` array whose
column ``m`` weights the design matrix ``[h, 1]``.  The network's own
output layer is unused by UNA models and kept at zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.optimize import minimize_scalar

from .blr import BlrPosterior, log_marginal
from .gp import KernelSpec, gp_prior_sample
from .net import (
    MlpParams,
    MlpSpec,
    OptimizerConfig,
    backward_hidden,
    hidden_forward,
    mlp_init,
    train,
)
from .nlm import nlm_posterior
from .numkit import RngStream

log = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))
DEGENERATE_NORM = 1e-12
_MAX_REDRAWS = 100


class DegenerateGradient(ValueError):
    """A gradient estimate is too small to define a direction."""


# -- diversity -------------------------------------------------------------------


def cos_sim_sq(g, h) -> float:
    """Squared cosine of the angle between two gradient vectors."""
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    gg, hh = float(g @ g), float(h @ h)
    if np.sqrt(gg) <= DEGENERATE_NORM or np.sqrt(hh) <= DEGENERATE_NORM:
        raise DegenerateGradient("gradient norm below 1e-12")
    return float(min((g @ h) ** 2 / (gg * hh), 1.0))


def draw_perturbations(n: int, dim: int, sigma: float, stream: RngStream) -> np.ndarray:
    """``(n, dim)`` finite-difference steps; near-zero steps are redrawn."""
    if not sigma > 0:
        raise ValueError("perturbation scale must be positive")
    delta = sigma * stream.standard_normal((n, dim))
    for _ in range(_MAX_REDRAWS):
        bad = np.abs(delta) < 1e-12
        if not bad.any():
            return delta
        delta[bad] = sigma * stream.standard_normal(int(bad.sum()))
    raise RuntimeError("could not draw non-degenerate perturbations")


def _design(h):
    return np.hstack([h, np.ones((h.shape[0], 1))])


def _stack_inputs(X, delta):
    n, d = X.shape
    shifted = [X + delta[:, k : k + 1] * np.eye(d)[k] for k in range(d)]
    return np.vstack([X, *shifted])


def _fd_from_outputs(F, delta):
    """Turn stacked head outputs into ``G[n, m, d]``."""
    n, d = delta.shape
    base = F[:n]
    blocks = F[n:].reshape(d, n, -1)  # (d, n, M)
    return np.transpose((blocks - base[None]) / delta.T[:, :, None], (1, 2, 0))


def fd_gradients_batch(params: MlpParams, heads, X, delta) -> np.ndarray:
    """Finite-difference input gradients of every head, shape ``(N, M, D)``."""
    X = np.asarray(X, dtype=float)
    h, _ = hidden_forward(params, _stack_inputs(X, delta))
    return _fd_from_outputs(_design(h) @ heads, delta)


def fd_gradients(params: MlpParams, heads, x, sigma: float, stream: RngStream) -> np.ndarray:
    """``(M, D)`` gradient estimates at one point ``x``.

    One step per input dimension is shared across all heads.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    delta = draw_perturbations(1, x.shape[1], sigma, stream)
    return fd_gradients_batch(params, heads, x, delta)[0]


def _pair_terms(G):
    """Per-point penalty and its gradient w.r.t. ``G`` (both batched)."""
    A = np.einsum("nmd,nkd->nmk", G, G)
    p = np.einsum("nmm->nm", A)
    ok = np.sqrt(np.maximum(p, 0.0)) > DEGENERATE_NORM
    safe_p = np.where(ok, p, 1.0)
    denom = safe_p[:, :, None] * safe_p[:, None, :]
    mask = ok[:, :, None] & ok[:, None, :]
    M = G.shape[1]
    mask = mask & ~np.eye(M, dtype=bool)[None]
    C = np.where(mask, A * A / denom, 0.0)
    S = 0.5 * C.sum(axis=(1, 2))
    B = np.where(mask, 2.0 * A / denom, 0.0)
    diag = (B * A).sum(axis=2) / safe_p
    dG = np.einsum("nmk,nkd->nmd", B, G) - diag[:, :, None] * G
    return S, dG


POOLINGS = ("point", "batch")


def _pool(G, pooling):
    if pooling == "point":
        return G
    if pooling == "batch":
        n, M, d = G.shape
        return np.transpose(G, (1, 0, 2)).reshape(1, M, n * d)
    raise ValueError(f"unknown pooling {pooling!r}")


def _unpool(dG, shape, pooling):
    if pooling == "point":
        return dG
    n, M, d = shape
    return np.transpose(dG.reshape(M, n, d), (1, 0, 2))


def penalty_from_gradients(G, normalized: bool = False, pooling: str = "point") -> float:
    """Summed pairwise CosSim^2 of gradient estimates ``G[n, m, d]``.

    ``pooling="point"`` averages the per-point penalty over the batch;
    ``"batch"`` compares each head's gradients over the whole batch as one
    ``n * d`` vector (the only form that is not constant when ``d = 1``).
    ``normalized`` divides by the number of head pairs.
    """
    G = np.asarray(G, dtype=float)
    M = G.shape[1]
    if M < 2 or len(G) == 0:
        return 0.0
    S, _ = _pair_terms(_pool(G, pooling))
    val = float(S.mean())
    return val / (M * (M - 1) / 2) if normalized else val


def diversity_penalty(params, heads, X, sigma: float, stream: RngStream,
                      normalized: bool = False, pooling: str = "point") -> float:
    X = np.asarray(X, dtype=float)
    heads = np.asarray(heads, dtype=float)
    if heads.shape[1] < 2:
        return 0.0
    delta = draw_perturbations(len(X), X.shape[1], sigma, stream)
    G = fd_gradients_batch(params, heads, X, delta)
    return penalty_from_gradients(G, normalized, pooling)


# -- fit term ---------------------------------------------------------------------


def heads_sq_norm(heads) -> float:
    return float(np.sum(np.asarray(heads) ** 2))


def fit_term(params: MlpParams, heads, X, y, noise_var: float, gamma: float) -> float:
    """Average Gaussian log-likelihood of the heads minus an l2 penalty on body and heads."""
    y = np.asarray(y, dtype=float)
    h, _ = hidden_forward(params, X)
    R = y[:, None] - _design(h) @ heads
    n, M = R.shape
    ll = -0.5 * n * (_LOG_2PI + np.log(noise_var)) - 0.5 * np.sum(R * R) / (M * noise_var)
    return float(ll - gamma * (params.sq_norm(include_head=False) + heads_sq_norm(heads)))


def luna_objective_and_grad(params: MlpParams, heads, X, y, noise_var, gamma, lam, delta,
                            data_scale: float = 1.0, pooling: str = "point"):
    """``L_FIT - lam * raw penalty`` and gradients for a fixed set of FD steps.

    Returns ``(value, fit, penalty, grads_params, grads_heads)``; ``lam`` is
    the effective weight on the raw (batch-mean) penalty.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    heads = np.asarray(heads, dtype=float)
    n = len(y)
    M = heads.shape[1]
    use_div = lam != 0 and M >= 2 and delta is not None
    Xall = _stack_inputs(X, delta) if use_div else X
    h, cache = hidden_forward(params, Xall)
    Phi = _design(h)
    F = Phi @ heads

    # fit term on the first n rows
    R = y[:, None] - F[:n]
    body_sq = params.sq_norm(include_head=False)
    ll = -0.5 * n * (_LOG_2PI + np.log(noise_var)) - 0.5 * np.sum(R * R) / (M * noise_var)
    fit = data_scale * ll - gamma * (body_sq + heads_sq_norm(heads))
    dF = np.zeros_like(F)
    dF[:n] = data_scale * R / (M * noise_var)

    penalty = 0.0
    if use_div:
        G = _fd_from_outputs(F, delta)
        S, dG = _pair_terms(_pool(G, pooling))
        penalty = float(S.mean())
        dG = -lam * _unpool(dG, G.shape, pooling) / len(S)  # d(value)/dG
        scaled = dG / delta[:, None, :]  # (n, M, d)
        dF[:n] -= scaled.sum(axis=2)
        d = delta.shape[1]
        dF[n:] += np.transpose(scaled, (2, 0, 1)).reshape(d * n, M)

    d_heads = Phi.T @ dF - 2.0 * gamma * heads
    d_phi = dF @ heads.T
    grads = backward_hidden(params, cache, d_phi[:, :-1])
    arrays = params.arrays()
    g = grads.arrays()
    for k in range(len(arrays) - 2):
        g[k] = g[k] - 2.0 * gamma * arrays[k]
    value = fit - lam * penalty
    return float(value), float(fit), penalty, MlpParams.from_arrays(params.spec, g), d_heads


# -- annealing --------------------------------------------------------------------

SCHEDULES = ("constant", "sqrt", "sigmoid", "tanh")


@dataclass(frozen=True)
class AnnealSchedule:
    kind: str = "constant"
    scale: float = 1.0
    total: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.scale < 0:
            raise ValueError("schedule scale must be non-negative")
        if self.total < 1:
            raise ValueError("schedule length must be >= 1")


def anneal(schedule: AnnealSchedule, x: float) -> float:
    C, N = schedule.scale, schedule.total
    if schedule.kind == "constant":
        return C
    if not 0 <= x <= N:
        raise ValueError(f"epoch {x} outside [0, {N}]")
    if schedule.kind == "sqrt":
        return C * np.sqrt(x / N)
    if schedule.kind == "sigmoid":
        return C / (1.0 + np.exp(-6.0 * x / N + 3.0))
    return C * (np.tanh(6.0 * x / N - 3.0) + 1.0) / 2.0


# -- LUNA -------------------------------------------------------------------------------


@dataclass(frozen=True)
class LunaConfig:
    spec: MlpSpec
    n_heads: int = 20
    gamma: float = 0.0
    prior_var: float = 1.0
    noise_var: float = 1.0
    sigma_perturb: float = 0.1
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pooling: str = "batch"

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.n_heads < 1:
            raise ValueError("need at least one auxiliary head")
        if not self.sigma_perturb > 0:
            raise ValueError("perturbation scale must be positive")
        if self.prior_var <= 0 or self.noise_var <= 0:
            raise ValueError("prior and noise variances must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not self.spec.hidden:
            raise ValueError("UNA models need at least one hidden layer")


@dataclass
class LunaTrace:
    fit: np.ndarray
    diversity: np.ndarray  # normalised, batch mean
    lam: np.ndarray


def init_heads(spec: MlpSpec, n_heads: int, stream: RngStream) -> np.ndarray:
    p = spec.n_features
    return stream.normal(1.0 / np.sqrt(p), (p, n_heads))


def _zero_head(params: MlpParams) -> MlpParams:
    out = params.copy()
    out.weights[-1] = np.zeros_like(out.weights[-1])
    out.biases[-1] = np.zeros_like(out.biases[-1])
    return out


def head_of(params: MlpParams) -> np.ndarray:
    """The network's own output layer as a single ``(L + 1, 1)`` head."""
    return np.concatenate([params.weights[-1][0], params.biases[-1]])[:, None]


def train_luna(dataset, config: LunaConfig, stream: RngStream, init: MlpParams | None = None,
               heads: np.ndarray | None = None):
    """Gradient ascent on ``L_FIT - lambda * penalty``.  Returns ``(params, heads, trace)``.

    The penalty weight at each step is ``anneal(schedule, epoch) * 2n / (M (M-1))``
    with ``n`` the current batch size; diversity is measured at the batch inputs.
    Streams: ``split(0)`` body init, ``split(1)`` shuffling, ``split(2)`` FD steps,
    ``split(3)`` head init.
    """
    X = np.asarray(dataset.X, dtype=float)
    y = np.asarray(dataset.y, dtype=float)
    spec, M, N = config.spec, config.n_heads, len(y)
    params = init.copy() if init is not None else _zero_head(mlp_init(spec, stream.split(0)))
    if heads is None:
        heads = init_heads(spec, M, stream.split(3))
    heads = np.array(heads, dtype=float)
    if heads.shape != (spec.n_features, M):
        raise ValueError(f"heads must have shape {(spec.n_features, M)}, got {heads.shape}")
    pert = stream.split(2)
    epochs = config.optimizer.epochs
    fits, divs, lams = (np.zeros(epochs) for _ in range(3))
    counts = np.zeros(epochs)

    def objective(arrays, idx, epoch):
        p = MlpParams.from_arrays(spec, arrays[:-1])
        xb, yb = (X, y) if idx is None else (X[idx], y[idx])
        n = len(yb)
        lam = anneal(config.schedule, epoch)
        lam_eff = lam * 2.0 * n / (M * (M - 1)) if M > 1 else 0.0
        delta = draw_perturbations(n, X.shape[1], config.sigma_perturb, pert) if lam_eff else None
        val, fit, pen, gp, gh = luna_objective_and_grad(
            p, arrays[-1], xb, yb, config.noise_var, config.gamma, lam_eff, delta, N / n,
            config.pooling,
        )
        fits[epoch] += fit
        divs[epoch] += pen / (M * (M - 1) / 2) if M > 1 else 0.0
        lams[epoch] = lam
        counts[epoch] += 1
        return -val, [-a for a in gp.arrays()] + [-gh]

    arrays, _ = train(params.arrays() + [heads], objective, N, config.optimizer, stream.split(1))
    counts = np.maximum(counts, 1)
    trace = LunaTrace(fits / counts, divs / counts, lams)
    return MlpParams.from_arrays(spec, arrays[:-1]), arrays[-1], trace


def luna_posterior(params: MlpParams, dataset, prior_var: float, noise_var: float) -> BlrPosterior:
    return nlm_posterior(params, dataset, prior_var, noise_var)


def select_luna_model(runs: Sequence[dict]) -> dict:
    """Keep runs with validation LL at or above the 90th percentile, then least diverse.

    Each run is a mapping with ``"ll"`` and ``"diversity"`` keys.
    """
    if not runs:
        raise ValueError("no runs to select from")
    lls = np.array([r["ll"] for r in runs], dtype=float)
    cut = np.percentile(lls, 90)
    best = None
    for i, r in enumerate(runs):
        if lls[i] >= cut and (best is None or r["diversity"] < runs[best]["diversity"]):
            best = i
    return runs[best]


# -- TUNA -------------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceSet:
    X: np.ndarray  # (I, D)
    G: np.ndarray  # (I, M)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        G = np.asarray(self.G, dtype=float)
        if G.ndim == 1:
            G = G[:, None]
        if len(X) < 1 or len(X) != len(G):
            raise ValueError(f"reference inputs {X.shape} and values {G.shape} disagree")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(G))):
            raise ValueError("reference set contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "G", G)

    @property
    def n_functions(self) -> int:
        return self.G.shape[1]


@dataclass(frozen=True)
class GpPrior:
    spec: KernelSpec


@dataclass(frozen=True)
class UserValues:
    G: np.ndarray


Generator = Union[GpPrior, UserValues]


def make_reference_points(X, sigma_x: float, stream: RngStream) -> np.ndarray:
    """Inputs stacked on top of one Gaussian-perturbed copy of themselves."""
    if sigma_x < 0:
        raise ValueError("sigma_x must be non-negative")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.vstack([X, X + sigma_x * stream.standard_normal(X.shape)])


def build_reference_set(X_ref, generator: Generator, n_functions: int,
                        stream: RngStream) -> ReferenceSet:
    if n_functions < 1:
        raise ValueError("need at least one reference function")
    X_ref = np.asarray(X_ref, dtype=float)
    if X_ref.ndim == 1:
        X_ref = X_ref[:, None]
    if isinstance(generator, GpPrior):
        return ReferenceSet(X_ref, gp_prior_sample(generator.spec, X_ref, n_functions, stream))
    G = np.asarray(generator.G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if G.shape != (len(X_ref), n_functions):
        raise ValueError(f"reference values have shape {G.shape}, "
                         f"expected {(len(X_ref), n_functions)}")
    return ReferenceSet(X_ref, G)


def tuna_pseudo_augment(refset: ReferenceSet, X_pseudo, targets) -> ReferenceSet:
    """Append pseudo points; a 1-D ``targets`` vector is copied to every function."""
    X_pseudo = np.asarray(X_pseudo, dtype=float)
    if X_pseudo.ndim == 1:
        X_pseudo = X_pseudo[:, None]
    if X_pseudo.shape[1] != refset.X.shape[1]:
        raise ValueError("pseudo inputs have the wrong dimension")
    targets = np.asarray(targets, dtype=float)
    M = refset.n_functions
    if targets.ndim == 1:
        if len(targets) != len(X_pseudo):
            raise ValueError("one target per pseudo input expected")
        targets = np.repeat(targets[:, None], M, axis=1)
    elif targets.shape != (len(X_pseudo), M):
        raise ValueError(f"pseudo targets must have shape {(len(X_pseudo), M)}")
    return ReferenceSet(np.vstack([refset.X, X_pseudo]), np.vstack([refset.G, targets]))


def tuna_loss_and_grad(params: MlpParams, heads, X, G, gamma=0.0, data_scale=1.0):
    """``(1/M) sum_m |g_m - Phi w_m|^2 + gamma |Psi|^2`` and its gradients."""
    h, cache = hidden_forward(params, X)
    Phi = _design(h)
    R = Phi @ heads - G
    M = G.shape[1]
    loss = data_scale * np.sum(R * R) / M
    loss += gamma * (params.sq_norm(include_head=False) + heads_sq_norm(heads))
    dF = 2.0 * data_scale * R / M
    d_heads = Phi.T @ dF + 2.0 * gamma * heads
    grads = backward_hidden(params, cache, (dF @ heads.T)[:, :-1])
    g = grads.arrays()
    arrays = params.arrays()
    for k in range(len(arrays) - 2):
        g[k] = g[k] + 2.0 * gamma * arrays[k]
    return float(loss), MlpParams.from_arrays(params.spec, g), d_heads


def train_tuna(refset: ReferenceSet, spec: MlpSpec, optimizer: OptimizerConfig,
               stream: RngStream, gamma: float = 0.0, init: MlpParams | None = None,
               heads: np.ndarray | None = None, freeze_body: bool = False):
    """Minimise the reference-matching loss.  Returns ``(params, heads, trace)``.

    Heads start at zero unless given.  Streams: ``split(0)`` init, ``split(1)``
    shuffling.
    """
    if not spec.hidden:
        raise ValueError("UNA models need at least one hidden layer")
    if refset.X.shape[1] != spec.input_dim:
        raise ValueError("reference inputs do not match the network input size")
    params = init.copy() if init is not None else _zero_head(mlp_init(spec, stream.split(0)))
    M = refset.n_functions
    heads = np.zeros((spec.n_features, M)) if heads is None else np.array(heads, dtype=float)
    X, G = refset.X, refset.G
    I = len(X)

    def objective(arrays, idx, epoch):
        p = MlpParams.from_arrays(spec, arrays[:-1])
        xb, gb = (X, G) if idx is None else (X[idx], G[idx])
        loss, gp, gh = tuna_loss_and_grad(p, arrays[-1], xb, gb, gamma, I / len(xb))
        body = gp.arrays()
        if freeze_body:
            body = [np.zeros_like(a) for a in body]
        return loss, body + [gh]

    arrays, trace = train(params.arrays() + [heads], objective, I, optimizer, stream.split(1))
    return MlpParams.from_arrays(spec, arrays[:-1]), arrays[-1], trace


def tuna_posterior(params: MlpParams, dataset, prior_var: float, noise_var: float) -> BlrPosterior:
    return nlm_posterior(params, dataset, prior_var, noise_var)


def fit_prior_variance(Phi, G, noise_var: float, bounds=(1e-6, 1e6)) -> float:
    """Empirical-Bayes prior variance: maximise sum_m log N(g_m; 0, a Phi Phi^T + s2 I)."""
    Phi = np.asarray(Phi, dtype=float)
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]

    def neg(log_a):
        a = float(np.exp(log_a))
        return -sum(log_marginal(Phi, G[:, m], a, noise_var) for m in range(G.shape[1]))

    res = minimize_scalar(neg, bounds=(np.log(bounds[0]), np.log(bounds[1])), method="bounded",
                          options={"xatol": 1e-6})
    return float(np.exp(res.x))
