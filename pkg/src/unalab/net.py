"""Fully connected networks with hand-written backprop, plus GD/SGD/Adam.

Weights follow the ``(fan_out, fan_in)`` convention, so a layer computes
``h @ W.T + b``.  The last layer is always a linear head; everything below
it is the feature body whose final activation (with a trailing column of
ones) forms the design matrix used by the Bayesian heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numkit import RngStream

ACTIVATIONS = ("relu", "tanh")


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    activation: str = "relu"
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def n_features(self) -> int:
        """Columns of the design matrix (last hidden width plus bias)."""
        if not self.hidden:
            raise ValueError("a network without hidden layers has no features")
        return self.hidden[-1] + 1


@dataclass
class MlpParams:
    """Layer weights and biases; the final entry is the linear head."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, spec: MlpSpec, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return cls(spec, list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            self.spec,
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
        )

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def sq_norm(self, include_head: bool = True) -> float:
        arrays = self.arrays() if include_head else self.arrays()[:-2]
        return float(sum(np.sum(a * a) for a in arrays))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec: np.ndarray) -> "MlpParams":
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(np.asarray(vec[pos : pos + a.size], dtype=float).reshape(a.shape))
            pos += a.size
        return MlpParams.from_arrays(self.spec, arrays)


def mlp_init(spec: MlpSpec, stream: RngStream) -> MlpParams:
    """He (ReLU) or Xavier-style (Tanh) normal init with zero biases."""
    gain = 2.0 if spec.activation == "relu" else 1.0
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(stream.normal(np.sqrt(gain / fan_in), (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec, weights, biases)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(float)
    return 1.0 - h * h


@dataclass
class Cache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] | None = None


def hidden_forward(params: MlpParams, X, masks=None) -> tuple[np.ndarray, Cache]:
    """Run the feature body; returns the last hidden activation and cache.

    ``masks`` (one array per hidden layer, broadcastable to the activation)
    multiplies each activation; dropout passes its rescaled keep-masks here.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise ValueError(
            f"expected inputs of shape (N, {params.spec.input_dim}), got {X.shape}"
        )
    act = params.spec.activation
    cache = Cache(masks=masks)
    h = X
    for layer in range(params.n_hidden):
        cache.inputs.append(h)
        z = h @ params.weights[layer].T + params.biases[layer]
        a = _act(act, z)
        cache.pre.append(z)
        cache.post.append(a)
        h = a * masks[layer] if masks is not None else a
    cache.inputs.append(h)
    return h, cache


def forward(params: MlpParams, X, masks=None) -> tuple[np.ndarray, Cache]:
    h, cache = hidden_forward(params, X, masks)
    out = h @ params.weights[-1].T + params.biases[-1]
    if params.spec.output_dim == 1:
        out = out[:, 0]
    return out, cache


def features(params: MlpParams, X) -> np.ndarray:
    """Design matrix: last hidden activation with a trailing ones column."""
    if params.n_hidden < 1:
        raise ValueError("features need at least one hidden layer")
    h, _ = hidden_forward(params, X)
    return np.hstack([h, np.ones((h.shape[0], 1))])


def backward_hidden(params: MlpParams, cache: Cache, d_hidden) -> MlpParams:
    """Gradients of the body given dLoss/d(last hidden activation).

    Head gradients in the returned structure are zero.
    """
    grads = params.zeros_like()
    act = params.spec.activation
    d_h = np.asarray(d_hidden, dtype=float)
    for layer in range(params.n_hidden - 1, -1, -1):
        if cache.masks is not None:
            d_h = d_h * cache.masks[layer]
        d_z = d_h * _act_grad(act, cache.pre[layer], cache.post[layer])
        grads.weights[layer] = d_z.T @ cache.inputs[layer]
        grads.biases[layer] = d_z.sum(axis=0)
        if layer > 0:
            d_h = d_z @ params.weights[layer]
    return grads


def backward(params: MlpParams, cache: Cache, d_out) -> MlpParams:
    """Exact gradients of a scalar loss given dLoss/d(outputs)."""
    d_out = np.asarray(d_out, dtype=float)
    if d_out.ndim == 1:
        d_out = d_out[:, None]
    top = cache.inputs[-1]
    if params.n_hidden == 0:
        grads = params.zeros_like()
    else:
        grads = backward_hidden(params, cache, d_out @ params.weights[-1])
    grads.weights[-1] = d_out.T @ top
    grads.biases[-1] = d_out.sum(axis=0)
    return grads


def input_gradient(params: MlpParams, X) -> np.ndarray:
    """d output / d input for a single-output net, shape (N, D)."""
    out, cache = forward(params, X)
    act = params.spec.activation
    d = np.broadcast_to(params.weights[-1], (len(out), params.weights[-1].shape[1]))
    for layer in range(params.n_hidden - 1, -1, -1):
        d = d * _act_grad(act, cache.pre[layer], cache.post[layer])
        d = d @ params.weights[layer]
    return d


# -- optimisation -----------------------------------------------------------

OPTIMIZERS = ("gd", "sgd", "adam")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 0  # 0 means full batch
    epochs: int = 1000

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam decays must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.batch_size < 0 or self.epochs < 0:
            raise ValueError("batch_size and epochs must be non-negative")


@dataclass
class OptimizerState:
    t: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def optimizer_step(config: OptimizerConfig, state: OptimizerState, arrays, grads):
    """One descent step. Returns ``(new_arrays, new_state)``."""
    if config.kind in ("gd", "sgd"):
        new = [p - config.lr * g for p, g in zip(arrays, grads)]
        return new, OptimizerState(state.t + 1)
    t = state.t + 1
    m_prev = state.m if state.m is not None else [np.zeros_like(p) for p in arrays]
    v_prev = state.v if state.v is not None else [np.zeros_like(p) for p in arrays]
    b1, b2 = config.beta1, config.beta2
    m = [b1 * mp + (1 - b1) * g for mp, g in zip(m_prev, grads)]
    v = [b2 * vp + (1 - b2) * g * g for vp, g in zip(v_prev, grads)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    new = [
        p - config.lr * (mi / c1) / (np.sqrt(vi / c2) + config.eps)
        for p, mi, vi in zip(arrays, m, v)
    ]
    return new, OptimizerState(t, m, v)


Objective = Callable[[list, "np.ndarray | None", int], tuple[float, list]]


def train(
    arrays: Sequence[np.ndarray],
    objective: Objective,
    n_data: int,
    config: OptimizerConfig,
    stream: RngStream,
    post_step: Callable[[list], list] | None = None,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Minimise ``objective`` over a flat list of parameter arrays.

    ``objective(arrays, idx, epoch)`` returns ``(loss, grads)`` on the rows
    ``idx`` (``None`` means all rows, used for full-batch training).
    Minibatches reshuffle each epoch from ``stream``; the final short batch
    is kept.  ``post_step`` may project parameters after every update.

    Returns the trained arrays and the per-epoch mean loss.
    """
    arrays = [np.array(a, dtype=float) for a in arrays]
    state = OptimizerState()
    trace = np.zeros(config.epochs)
    full = config.kind == "gd" or config.batch_size == 0 or config.batch_size >= n_data
    if config.kind == "sgd" and config.batch_size == 0:
        batch = 1
        full = n_data <= 1
    else:
        batch = config.batch_size
    for epoch in range(config.epochs):
        if full:
            batches = [None]
        else:
            order = stream.permutation(n_data)
            batches = [order[i : i + batch] for i in range(0, n_data, batch)]
        total = 0.0
        for idx in batches:
            loss, grads = objective(arrays, idx, epoch)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}")
            arrays, state = optimizer_step(config, state, arrays, grads)
            if post_step is not None:
                arrays = post_step(arrays)
            total += loss
        trace[epoch] = total / len(batches)
    return arrays, trace


def mse_objective(params_spec: MlpSpec, X, y, gamma: float = 0.0) -> Objective:
    """Mean squared error plus ``gamma * ||theta||^2`` as a train objective."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)

    def objective(arrays, idx, epoch):
        params = MlpParams.from_arrays(params_spec, arrays)
        xb, yb = (X, y) if idx is None else (X[idx], y[idx])
        out, cache = forward(params, xb)
        resid = out - yb
        n = len(yb)
        loss = float(resid @ resid) / n + gamma * params.sq_norm()
        grads = backward(params, cache, 2.0 * resid / n)
        g = [ga + 2.0 * gamma * a for ga, a in zip(grads.arrays(), arrays)]
        return loss, g

    return objective
