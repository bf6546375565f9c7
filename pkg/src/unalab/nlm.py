"""Neural Linear Models: learn a feature body, then fit a Bayesian head on it.

Objectives are written in "maximise" form; training minimises their
negation.  With minibatches the data terms are rescaled by ``N / batch``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blr import BlrPosterior, PredictiveDist, fit_blr, log_marginal_and_grad, predict_blr
from .net import (
    MlpParams,
    MlpSpec,
    OptimizerConfig,
    backward,
    backward_hidden,
    features,
    forward,
    hidden_forward,
    mlp_init,
    train,
)
from .numkit import RngStream

MODES = ("mle", "map", "marginal")
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class NlmConfig:
    spec: MlpSpec
    prior_var: float
    noise_var: float
    gamma: float = 0.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mode: str = "map"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown NLM training mode {self.mode!r}")
        if self.prior_var <= 0 or self.noise_var <= 0:
            raise ValueError("prior and noise variances must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.mode == "mle" and self.gamma != 0:
            raise ValueError("MLE training is MAP with gamma = 0")


def _design(h: np.ndarray) -> np.ndarray:
    return np.hstack([h, np.ones((h.shape[0], 1))])


def map_objective_and_grad(params: MlpParams, X, y, noise_var, gamma, data_scale=1.0):
    """MAP objective over the full network and its gradient (an MlpParams)."""
    y = np.asarray(y, dtype=float)
    out, cache = forward(params, X)
    resid = y - out
    n = len(y)
    value = data_scale * (
        -0.5 * n * (_LOG_2PI + np.log(noise_var)) - 0.5 * float(resid @ resid) / noise_var
    )
    value -= gamma * params.sq_norm()
    grads = backward(params, cache, data_scale * resid / noise_var)
    arrays = [g - 2.0 * gamma * a for g, a in zip(grads.arrays(), params.arrays())]
    return float(value), MlpParams.from_arrays(params.spec, arrays)


def map_objective(params: MlpParams, X, y, noise_var: float, gamma: float) -> float:
    """``log N(y; f(X), noise_var I) - gamma ||theta_full||^2``."""
    return map_objective_and_grad(params, X, y, noise_var, gamma)[0]


def marginal_objective_and_grad(params, X, y, prior_var, noise_var, gamma, data_scale=1.0):
    """Exact log evidence of the Bayesian head minus a penalty on the body.

    The penalty covers every hidden-layer weight and bias; the network's own
    output head does not enter this objective at all.
    """
    h, cache = hidden_forward(params, X)
    value, d_phi = log_marginal_and_grad(_design(h), y, prior_var, noise_var)
    value *= data_scale
    grads = backward_hidden(params, cache, data_scale * d_phi[:, :-1])
    arrays = params.arrays()
    g = grads.arrays()
    for k in range(len(arrays) - 2):
        g[k] = g[k] - 2.0 * gamma * arrays[k]
    value -= gamma * params.sq_norm(include_head=False)
    return float(value), MlpParams.from_arrays(params.spec, g)


def marginal_objective(params, X, y, prior_var, noise_var, gamma) -> float:
    return marginal_objective_and_grad(params, X, y, prior_var, noise_var, gamma)[0]


def expanded_marginal_objective(params, X, y, prior_var, noise_var, gamma=0.0) -> float:
    """Textbook-style expansion of the evidence, evaluated term by term.

    ``-N/2 log(2 pi s2) - |y - Phi w|^2 / (2 s2) - P/2 log a - |w_N|^2 / (2 a)
    - 1/2 log|V_N| - gamma |theta|^2`` with ``w`` the network's own head.

    This is *not* the exact log evidence: the exact identity uses
    ``w = w_N`` in the residual and ``+1/2 log|V_N|``.  It is kept because
    the feature blow-up under :func:`scale_last_layer` is a property of this
    expansion (its last two terms grow without bound as features grow).
    """
    y = np.asarray(y, dtype=float)
    Phi = features(params, X)
    n, p = Phi.shape
    head = np.concatenate([params.weights[-1][0], params.biases[-1]])
    post = fit_blr(Phi, y, prior_var, noise_var)
    resid = y - Phi @ head
    _, logdet_v = np.linalg.slogdet(post.cov)
    return float(
        -0.5 * n * (_LOG_2PI + np.log(noise_var))
        - 0.5 * float(resid @ resid) / noise_var
        - 0.5 * p * np.log(prior_var)
        - 0.5 * float(post.mean @ post.mean) / prior_var
        - 0.5 * logdet_v
        - gamma * params.sq_norm(include_head=False)
    )


def train_nlm(dataset, config: NlmConfig, stream: RngStream, init: MlpParams | None = None):
    """Step 1 of the NLM: learn the feature body.  Returns ``(params, trace)``.

    The trace holds the negated objective per epoch.
    """
    X = np.asarray(dataset.X, dtype=float)
    y = np.asarray(dataset.y, dtype=float)
    params = init.copy() if init is not None else mlp_init(config.spec, stream.split(0))
    n = len(y)
    spec = config.spec

    def objective(arrays, idx, epoch):
        p = MlpParams.from_arrays(spec, arrays)
        xb, yb = (X, y) if idx is None else (X[idx], y[idx])
        scale = 1.0 if idx is None else n / len(idx)
        if config.mode == "marginal":
            val, g = marginal_objective_and_grad(
                p, xb, yb, config.prior_var, config.noise_var, config.gamma, scale
            )
        else:
            val, g = map_objective_and_grad(p, xb, yb, config.noise_var, config.gamma, scale)
        return -val, [-a for a in g.arrays()]

    arrays, trace = train(params.arrays(), objective, n, config.optimizer, stream.split(1))
    return MlpParams.from_arrays(spec, arrays), trace


def nlm_posterior(params: MlpParams, dataset, prior_var: float, noise_var: float) -> BlrPosterior:
    """Step 2: Bayesian linear regression on the learned features.

    The network's own output head plays no part.
    """
    return fit_blr(features(params, dataset.X), dataset.y, prior_var, noise_var)


def nlm_predict(params: MlpParams, post: BlrPosterior, X) -> PredictiveDist:
    return predict_blr(post, features(params, X))


def scale_last_layer(params: MlpParams, c: float) -> MlpParams:
    """Scale the last feature layer by ``c`` and divide the head weights by ``c``.

    For ReLU bodies the network output is unchanged and the non-bias
    feature columns are multiplied by ``c``.
    """
    if not c > 0:
        raise ValueError("scale factor must be positive")
    if params.n_hidden < 1:
        raise ValueError("need at least one hidden layer")
    if params.spec.activation != "relu":
        raise ValueError("output invariance needs a positively homogeneous activation")
    out = params.copy()
    out.weights[-2] = out.weights[-2] * c
    out.biases[-2] = out.biases[-2] * c
    out.weights[-1] = out.weights[-1] / c
    return out
