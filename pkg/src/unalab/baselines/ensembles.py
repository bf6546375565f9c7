"""Vanilla, bootstrapped and anchored deep ensembles."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..blr import PredictiveDist
from ..net import MlpParams, MlpSpec, OptimizerConfig, backward, forward, mlp_init, mse_objective, train
from ..numkit import RngStream

VARIANTS = ("vanilla", "bootstrap", "anchored")


@dataclass(frozen=True)
class EnsembleConfig:
    spec: MlpSpec
    n_members: int = 5
    variant: str = "vanilla"
    gamma: float = 0.0
    init_var: float = 1.0
    prior_var: float = 1.0
    noise_var: float = 0.1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown ensemble variant {self.variant!r}")
        if self.n_members < 2:
            raise ValueError("an ensemble needs at least two members")
        if min(self.init_var, self.prior_var, self.noise_var) <= 0:
            raise ValueError("variances must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @property
    def anchor_weight(self) -> float:
        """Diagonal entry of the anchoring matrix, noise over prior variance."""
        return self.noise_var / self.prior_var


@dataclass
class EnsembleModel:
    members: list[MlpParams]
    anchors: list[MlpParams] | None = None


def _gaussian_params(spec: MlpSpec, var: float, stream: RngStream) -> MlpParams:
    template = mlp_init(spec, RngStream(0))
    arrays = [stream.normal(np.sqrt(var), a.shape) for a in template.arrays()]
    return MlpParams.from_arrays(spec, arrays)


def anchored_loss_and_grad(params: MlpParams, anchor: MlpParams, X, y, weight: float,
                           n_total: int | None = None):
    """``mean((y - f)^2) + (weight / N) |theta - theta_anc|^2`` and its gradient."""
    y = np.asarray(y, dtype=float)
    n_total = len(y) if n_total is None else n_total
    out, cache = forward(params, X)
    resid = out - y
    diffs = [a - b for a, b in zip(params.arrays(), anchor.arrays())]
    reg = weight / n_total
    loss = float(resid @ resid) / len(y) + reg * sum(float(np.sum(d * d)) for d in diffs)
    grads = backward(params, cache, 2.0 * resid / len(y)).arrays()
    return loss, [g + 2.0 * reg * d for g, d in zip(grads, diffs)]


def _train_member(dataset, config: EnsembleConfig, stream: RngStream):
    X = np.asarray(dataset.X, dtype=float)
    y = np.asarray(dataset.y, dtype=float)
    spec = config.spec
    if config.variant == "bootstrap":
        rows = stream.split(2).integers(0, len(y), len(y))
        X, y = X[rows], y[rows]
    anchor = None
    if config.variant == "anchored":
        params = _gaussian_params(spec, config.init_var, stream.split(0))
        anchor = _gaussian_params(spec, config.prior_var, stream.split(3))
        n = len(y)

        def objective(arrays, idx, epoch):
            p = MlpParams.from_arrays(spec, arrays)
            xb, yb = (X, y) if idx is None else (X[idx], y[idx])
            return anchored_loss_and_grad(p, anchor, xb, yb, config.anchor_weight, n)
    else:
        params = mlp_init(spec, stream.split(0))
        objective = mse_objective(spec, X, y, config.gamma)
    arrays, _ = train(params.arrays(), objective, len(y), config.optimizer, stream.split(1))
    return MlpParams.from_arrays(spec, arrays), anchor


def train_ensemble(dataset, config: EnsembleConfig, stream: RngStream,
                   jobs: int = 1) -> EnsembleModel:
    """Train every member from its own child stream (``stream.split(m)``)."""
    streams = [stream.split(m) for m in range(config.n_members)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(lambda s: _train_member(dataset, config, s), streams))
    else:
        results = [_train_member(dataset, config, s) for s in streams]
    members = [r[0] for r in results]
    anchors = [r[1] for r in results] if config.variant == "anchored" else None
    return EnsembleModel(members, anchors)


def ensemble_predict(members, X) -> PredictiveDist:
    """Mean and population variance of member predictions; no noise term."""
    if isinstance(members, EnsembleModel):
        members = members.members
    if len(members) < 2:
        raise ValueError("ensemble prediction needs at least two members")
    preds = np.stack([forward(m, X)[0] for m in members])
    var = preds.var(axis=0)
    return PredictiveDist(preds.mean(axis=0), var, var)
