import numpy as np
import pytest

from unalab.bench import Dataset, gen_cubic_gap, normalize
from unalab.blr import log_marginal, predict_blr
from unalab.net import MlpSpec, OptimizerConfig, features, forward, mlp_init
from unalab.nlm import (
    NlmConfig,
    expanded_marginal_objective,
    map_objective,
    map_objective_and_grad,
    marginal_objective,
    marginal_objective_and_grad,
    nlm_posterior,
    nlm_predict,
    scale_last_layer,
    train_nlm,
)
from unalab.numkit import RngStream

from helpers import central_diff, dense_gauss_logpdf, rel_err

LOG2PI = np.log(2 * np.pi)


def small_problem(seed, act="tanh"):
    r = RngStream(seed)
    spec = MlpSpec(1, (6, 4), act)
    p = mlp_init(spec, r.split(0))
    X = r.uniform(-2, 2, (9, 1))
    y = np.sin(X[:, 0]) + 0.1 * r.standard_normal(9)
    return spec, p, X, y


def test_config_validation():
    spec = MlpSpec(1, (4,))
    with pytest.raises(ValueError):
        NlmConfig(spec, 1.0, 1.0, mode="laplace")
    with pytest.raises(ValueError):
        NlmConfig(spec, 1.0, 1.0, gamma=0.1, mode="mle")
    with pytest.raises(ValueError):
        NlmConfig(spec, 0.0, 1.0)


def test_map_objective_perfect_fit():
    spec, p, X, _ = small_problem(0)
    y = forward(p, X)[0]
    assert np.isclose(map_objective(p, X, y, 0.3, 0.0), -0.5 * len(y) * (LOG2PI + np.log(0.3)))
    z = p.zeros_like()
    assert np.isclose(map_objective(z, X, np.zeros(len(X)), 0.3, 1.0),
                      -0.5 * len(X) * (LOG2PI + np.log(0.3)))


def test_map_objective_terms():
    spec, p, X, y = small_problem(1)
    r = y - forward(p, X)[0]
    hand = (-0.5 * len(y) * (LOG2PI + np.log(0.2)) - 0.5 * r @ r / 0.2
            - 0.05 * sum(np.sum(a * a) for a in p.arrays()))
    assert np.isclose(map_objective(p, X, y, 0.2, 0.05), hand)


def test_marginal_objective_definition():
    spec, p, X, y = small_problem(2)
    Phi = features(p, X)
    assert marginal_objective(p, X, y, 1.3, 0.2, 0.0) == log_marginal(Phi, y, 1.3, 0.2)
    dense = dense_gauss_logpdf(y, 1.3 * Phi @ Phi.T + 0.2 * np.eye(len(y)))
    body = sum(np.sum(a * a) for a in p.arrays()[:-2])
    assert abs(marginal_objective(p, X, y, 1.3, 0.2, 0.1) - (dense - 0.1 * body)) < 1e-8
    empty = marginal_objective(p, np.zeros((0, 1)), np.zeros(0), 1.3, 0.2, 0.1)
    assert np.isclose(empty, -0.1 * body)


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_objective_gradients(act):
    for seed in range(5):
        spec, p, X, y = small_problem(seed, act)
        _, g = map_objective_and_grad(p, X, y, 0.3, 0.01)
        num = central_diff(lambda v: map_objective(p.unflatten(v), X, y, 0.3, 0.01), p.flatten())
        assert rel_err(g.flatten(), num) < 1e-4
        _, g = marginal_objective_and_grad(p, X, y, 1.0, 0.3, 0.01)
        num = central_diff(lambda v: marginal_objective(p.unflatten(v), X, y, 1.0, 0.3, 0.01),
                           p.flatten())
        assert rel_err(g.flatten(), num) < 1e-4


def test_marginal_ignores_network_head():
    spec, p, X, y = small_problem(3)
    q = p.copy()
    q.weights[-1] = q.weights[-1] + 5.0
    assert marginal_objective(p, X, y, 1.0, 0.1, 0.0) == marginal_objective(q, X, y, 1.0, 0.1, 0.0)


def test_mle_equals_map_without_penalty():
    d = Dataset(*small_problem(4)[2:])
    spec = MlpSpec(1, (6, 4))
    opt = OptimizerConfig(epochs=50)
    _, t1 = train_nlm(d, NlmConfig(spec, 1.0, 0.1, 0.0, opt, "mle"), RngStream(0))
    _, t2 = train_nlm(d, NlmConfig(spec, 1.0, 0.1, 0.0, opt, "map"), RngStream(0))
    assert np.array_equal(t1, t2)


def test_zero_epochs_returns_init():
    d = Dataset(*small_problem(4)[2:])
    spec = MlpSpec(1, (6, 4))
    p, t = train_nlm(d, NlmConfig(spec, 1.0, 0.1, optimizer=OptimizerConfig(epochs=0)),
                     RngStream(3))
    init = mlp_init(spec, RngStream(3).split(0))
    assert np.array_equal(p.flatten(), init.flatten())


def test_cubic_gap_map_fit_quality():
    raw = gen_cubic_gap(RngStream(0).split(0))
    d, st = normalize(raw)
    cfg = NlmConfig(MlpSpec(1, (50, 20)), 1.0, (3 / st.y_std) ** 2, 1e-2,
                    OptimizerConfig("adam", 1e-2, epochs=5000))
    p, trace = train_nlm(d, cfg, RngStream(0))
    pred = forward(p, d.X)[0] * st.y_std + st.y_mean
    assert np.sqrt(np.mean((pred - raw.y) ** 2)) < 1.5 * 3.0
    assert trace[-1] < trace[0]


def test_posterior_is_ridge_on_features():
    spec, p, X, y = small_problem(5)
    d = Dataset(X, y)
    post = nlm_posterior(p, d, 2.0, 0.1)
    Phi = features(p, X)
    ridge = np.linalg.solve(Phi.T @ Phi + 0.1 / 2.0 * np.eye(Phi.shape[1]), Phi.T @ y)
    assert np.allclose(nlm_predict(p, post, X).mean, Phi @ ridge, atol=1e-8)
    ols = np.linalg.lstsq(Phi, y, rcond=None)[0]
    flat = nlm_posterior(p, d, 1e12, 0.1)
    assert np.allclose(predict_blr(flat, Phi).mean, Phi @ ols, atol=1e-4)
    empty = nlm_posterior(p, Dataset(np.zeros((0, 1)), np.zeros(0)), 2.0, 0.1)
    assert np.allclose(empty.mean, 0)


def test_scale_last_layer_invariances():
    spec, p, X, y = small_problem(6, "relu")
    for c in (10.0, 1e3):
        q = scale_last_layer(p, c)
        assert np.max(np.abs(forward(q, X)[0] - forward(p, X)[0])) < 1e-10
        assert np.allclose(features(q, X)[:, :-1], c * features(p, X)[:, :-1])
    nll = lambda pp: map_objective(pp, X, y, 0.1, 0.0)
    assert np.isclose(nll(scale_last_layer(p, 100.0)), nll(p))
    with pytest.raises(ValueError):
        scale_last_layer(p, 0.0)
    with pytest.raises(ValueError):
        scale_last_layer(small_problem(6, "tanh")[1], 2.0)


def _trained_cubic_net(seed):
    d, st = normalize(gen_cubic_gap(RngStream(seed).split(0)))
    cfg = NlmConfig(MlpSpec(1, (50, 20)), 1.0, (3 / st.y_std) ** 2, 1e-2,
                    OptimizerConfig("adam", 1e-2, epochs=500))
    return train_nlm(d, cfg, RngStream(seed))[0], d, cfg.noise_var


def test_expanded_objective_grows_under_rescaling():
    p, d, s2 = _trained_cubic_net(0)
    vals = [expanded_marginal_objective(scale_last_layer(p, c), d.X, d.y, 1.0, s2)
            for c in (1.0, 10.0, 100.0, 1000.0)]
    assert np.all(np.diff(vals) > 0)


def test_exact_evidence_falls_under_rescaling():
    # The exact evidence gains a -rank*log(c) volume term, so it cannot blow up.
    p, d, s2 = _trained_cubic_net(1)
    vals = [marginal_objective(scale_last_layer(p, c), d.X, d.y, 1.0, s2, 0.0)
            for c in (10.0, 100.0, 1000.0)]
    assert np.all(np.diff(vals) < 0)
