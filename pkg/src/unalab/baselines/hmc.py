"""Hamiltonian Monte Carlo and an HMC-sampled Bayesian neural network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..blr import PredictiveDist
from ..net import MlpParams, MlpSpec, backward, forward, mlp_init
from ..numkit import RngStream

Potential = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 1e-2
    n_leapfrog: int = 20
    n_iter: int = 1000
    burn_in: int = 0
    thin: int = 1
    mass: float = 1.0
    prior_sd: float = 1.0
    noise_sd: float = 1.0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.n_leapfrog < 1 or self.n_iter < 1 or self.thin < 1:
            raise ValueError("n_leapfrog, n_iter and thin must be >= 1")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("burn_in must lie in [0, n_iter)")
        if min(self.mass, self.prior_sd, self.noise_sd) <= 0:
            raise ValueError("mass and scales must be positive")


@dataclass
class HmcResult:
    trace: np.ndarray  # (n_iter, dim), current position after every iteration
    accepted: np.ndarray  # bool per iteration

    @property
    def accept_rate(self) -> float:
        return float(self.accepted.mean())

    def samples(self, burn_in: int = 0, thin: int = 1) -> np.ndarray:
        return self.trace[burn_in::thin]


def leapfrog(potential: Potential, q, p, step: float, n_steps: int, mass: float):
    """Half momentum step, alternating full steps, closing half step; momentum negated."""
    q = np.array(q, dtype=float)
    _, g = potential(q)
    p = p - 0.5 * step * g
    for i in range(n_steps):
        q = q + step * p / mass
        _, g = potential(q)
        if i < n_steps - 1:
            p = p - step * g
    p = p - 0.5 * step * g
    return q, -p


def hmc_sample(potential: Potential, config: HmcConfig, q0, stream: RngStream) -> HmcResult:
    """Sample ``exp(-U)``; ``potential(q)`` returns ``(U, dU/dq)``."""
    q = np.array(q0, dtype=float)
    u_cur, _ = potential(q)
    trace = np.zeros((config.n_iter, q.size))
    accepted = np.zeros(config.n_iter, dtype=bool)
    m = config.mass
    for i in range(config.n_iter):
        p0 = np.sqrt(m) * stream.standard_normal(q.shape)
        alpha = stream.uniform()
        with np.errstate(all="ignore"):
            q_new, p_new = leapfrog(potential, q, p0, config.step_size, config.n_leapfrog, m)
            u_new, _ = potential(q_new)
            log_ratio = u_cur - u_new + (p0 @ p0 - p_new @ p_new) / (2.0 * m)
        if np.isfinite(log_ratio) and np.isfinite(u_new) and alpha < np.exp(min(log_ratio, 0.0)):
            q, u_cur = q_new, u_new
            accepted[i] = True
        trace[i] = q
    return HmcResult(trace, accepted)


def bnn_potential(spec: MlpSpec, X, y, prior_sd: float, noise_sd: float) -> Potential:
    """Negative log posterior (up to a constant) of a Gaussian-prior BNN."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    template = mlp_init(spec, RngStream(0))

    def potential(q):
        p = template.unflatten(q)
        u = 0.5 * float(q @ q) / prior_sd**2
        grad = q / prior_sd**2
        if len(y):
            out, cache = forward(p, X)
            r = out - y
            u += 0.5 * float(r @ r) / noise_sd**2
            grad = grad + backward(p, cache, r / noise_sd**2).flatten()
        return u, grad

    return potential


def bnn_hmc_predict(spec: MlpSpec, dataset, config: HmcConfig, stream: RngStream, X_star,
                    return_result: bool = False):
    """Predictive statistics of network outputs over the thinned post-burn-in trace."""
    potential = bnn_potential(spec, dataset.X, dataset.y, config.prior_sd, config.noise_sd)
    q0 = mlp_init(spec, stream.split(0)).flatten()
    result = hmc_sample(potential, config, q0, stream.split(1))
    template = mlp_init(spec, RngStream(0))
    X_star = np.asarray(X_star, dtype=float)
    preds = np.stack([forward(template.unflatten(q), X_star)[0]
                      for q in result.samples(config.burn_in, config.thin)])
    var = preds.var(axis=0)
    dist = PredictiveDist(preds.mean(axis=0), var + config.noise_sd**2, var)
    return (dist, result) if return_result else dist
