"""Spectral-normalised body, random Fourier features and a Bayesian linear head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..blr import BlrPosterior, PredictiveDist, fit_blr, predict_blr
from ..net import MlpParams, MlpSpec, OptimizerConfig, hidden_forward, backward_hidden, mlp_init, train
from ..numkit import RngStream


@dataclass(frozen=True)
class SngpConfig:
    spec: MlpSpec
    norm_bound: float = 1.0
    power_iters: int = 10
    n_rff: int = 200
    length_scale: float = 1.0
    prior_var: float = 1.0
    noise_var: float = 0.1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.norm_bound <= 0:
            raise ValueError("normalising factor must be positive")
        if self.power_iters < 1 or self.n_rff < 1:
            raise ValueError("power_iters and n_rff must be >= 1")
        if self.length_scale <= 0 or self.prior_var <= 0 or self.noise_var <= 0:
            raise ValueError("length scale and variances must be positive")
        if not self.spec.hidden:
            raise ValueError("SNGP needs a hidden feature body")


@dataclass
class SngpModel:
    params: MlpParams
    rff_W: np.ndarray
    rff_b: np.ndarray
    length_scale: float
    posterior: BlrPosterior


def _power_iteration(W, iters, u):
    for _ in range(iters):
        v = W.T @ u
        v /= max(np.linalg.norm(v), 1e-300)
        u = W @ v
        u /= max(np.linalg.norm(u), 1e-300)
    return float(u @ W @ v), u


def spectral_normalize(W, c: float, iters: int, stream: RngStream, u=None):
    """Rescale ``W`` to spectral norm ``c`` if its power-iteration estimate exceeds ``c``.

    Returns the new matrix; pass ``u`` (and read it back via
    :func:`spectral_normalize_state`) to warm-start across calls.
    """
    return spectral_normalize_state(W, c, iters, stream, u)[0]


def spectral_normalize_state(W, c, iters, stream, u=None):
    W = np.asarray(W, dtype=float)
    if iters < 1:
        raise ValueError("need at least one power iteration")
    if u is None:
        u = stream.standard_normal(W.shape[0])
        u /= np.linalg.norm(u)
    sigma, u = _power_iteration(W, iters, u)
    if sigma > c:
        W = W * (c / sigma)
    return W, u


def rff_features(h, W, b, length_scale: float = 1.0) -> np.ndarray:
    """``sqrt(2 / D_L) cos(h W^T / l + b)``."""
    return np.sqrt(2.0 / len(b)) * np.cos(np.asarray(h) @ W.T / length_scale + b)


def train_sngp(dataset, config: SngpConfig, stream: RngStream) -> SngpModel:
    """Train body plus a linear RFF head on MSE, then refit the head as a BLR.

    Hidden weight matrices are spectrally normalised after every update.
    """
    X = np.asarray(dataset.X, dtype=float)
    y = np.asarray(dataset.y, dtype=float)
    spec = config.spec
    width = spec.hidden[-1]
    rng = stream.split(2)
    W_L = rng.standard_normal((config.n_rff, width))
    b_L = rng.uniform(0.0, 2.0 * np.pi, config.n_rff)
    ell = config.length_scale
    body = mlp_init(spec, stream.split(0))
    head = np.zeros(config.n_rff + 1)
    n_body = 2 * body.n_hidden
    sn_stream = stream.split(3)
    us = [None] * body.n_hidden

    def split_arrays(arrays):
        # the body's own output layer is kept only for shape compatibility
        p = MlpParams.from_arrays(spec, list(arrays[:n_body]) + list(body.arrays()[n_body:]))
        return p, arrays[n_body]

    def objective(arrays, idx, epoch):
        p, w = split_arrays(arrays)
        xb, yb = (X, y) if idx is None else (X[idx], y[idx])
        h, cache = hidden_forward(p, xb)
        z = h @ W_L.T / ell + b_L
        phi = np.sqrt(2.0 / config.n_rff) * np.cos(z)
        out = phi @ w[:-1] + w[-1]
        resid = out - yb
        n = len(yb)
        d_out = 2.0 * resid / n
        g_head = np.concatenate([phi.T @ d_out, [d_out.sum()]])
        d_phi = np.outer(d_out, w[:-1])
        d_z = -d_phi * np.sqrt(2.0 / config.n_rff) * np.sin(z)
        d_h = d_z @ W_L / ell
        g = backward_hidden(p, cache, d_h).arrays()[:n_body]
        return float(resid @ resid) / n, g + [g_head]

    def project(arrays):
        arrays = list(arrays)
        for k in range(body.n_hidden):
            arrays[2 * k], us[k] = spectral_normalize_state(
                arrays[2 * k], config.norm_bound, config.power_iters, sn_stream, us[k]
            )
        return arrays

    start = project(body.arrays()[:n_body] + [head])
    arrays, _ = train(start, objective, len(y), config.optimizer, stream.split(1), post_step=project)
    params, _ = split_arrays(arrays)
    h, _ = hidden_forward(params, X)
    post = fit_blr(rff_features(h, W_L, b_L, ell), y, config.prior_var, config.noise_var)
    return SngpModel(params, W_L, b_L, ell, post)


def sngp_features(model: SngpModel, X) -> np.ndarray:
    h, _ = hidden_forward(model.params, X)
    return rff_features(h, model.rff_W, model.rff_b, model.length_scale)


def sngp_predict(model: SngpModel, X) -> PredictiveDist:
    return predict_blr(model.posterior, sngp_features(model, X))
