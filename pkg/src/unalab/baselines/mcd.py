"""Monte Carlo dropout with inverted (train-time rescaled) masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..blr import PredictiveDist
from ..net import MlpParams, MlpSpec, OptimizerConfig, backward, forward, mlp_init, train
from ..numkit import RngStream


@dataclass(frozen=True)
class McdConfig:
    spec: MlpSpec
    rate: float = 0.1
    n_passes: int = 50
    gamma: float = 0.0
    noise_var: float = 0.1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if not 0 < self.rate < 1:
            raise ValueError("dropout rate must lie in (0, 1)")
        if self.n_passes < 2:
            raise ValueError("need at least two forward passes")
        if self.gamma < 0 or self.noise_var <= 0:
            raise ValueError("gamma must be >= 0 and noise variance > 0")


@dataclass
class McdModel:
    params: MlpParams
    config: McdConfig


def dropout_masks(spec: MlpSpec, n: int, rate: float, stream: RngStream) -> list[np.ndarray]:
    """Keep-masks scaled by ``1 / (1 - rate)``, one ``(n, width)`` array per hidden layer."""
    keep = 1.0 - rate
    return [(stream.uniform(size=(n, w)) < keep) / keep for w in spec.hidden]


def mcd_train(dataset, config: McdConfig, stream: RngStream) -> McdModel:
    X = np.asarray(dataset.X, dtype=float)
    y = np.asarray(dataset.y, dtype=float)
    spec = config.spec
    mask_stream = stream.split(2)

    def objective(arrays, idx, epoch):
        p = MlpParams.from_arrays(spec, arrays)
        xb, yb = (X, y) if idx is None else (X[idx], y[idx])
        masks = dropout_masks(spec, len(yb), config.rate, mask_stream)
        out, cache = forward(p, xb, masks)
        resid = out - yb
        loss = float(resid @ resid) / len(yb) + config.gamma * p.sq_norm()
        grads = backward(p, cache, 2.0 * resid / len(yb)).arrays()
        return loss, [g + 2.0 * config.gamma * a for g, a in zip(grads, arrays)]

    params = mlp_init(spec, stream.split(0))
    arrays, _ = train(params.arrays(), objective, len(y), config.optimizer, stream.split(1))
    return McdModel(MlpParams.from_arrays(spec, arrays), config)


def mcd_predict(model: McdModel, X, stream: RngStream, noise_var: float | None = None) -> PredictiveDist:
    """Statistics of ``n_passes`` stochastic forward passes."""
    X = np.asarray(X, dtype=float)
    cfg = model.config
    noise_var = cfg.noise_var if noise_var is None else noise_var
    preds = np.stack([
        forward(model.params, X, dropout_masks(cfg.spec, len(X), cfg.rate, stream))[0]
        for _ in range(cfg.n_passes)
    ])
    var = preds.var(axis=0)
    return PredictiveDist(preds.mean(axis=0), var + noise_var, var)
