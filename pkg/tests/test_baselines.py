import numpy as np
import pytest

from unalab.baselines import (
    EnsembleConfig,
    HmcConfig,
    McdConfig,
    SngpConfig,
    anchored_loss_and_grad,
    bnn_hmc_predict,
    bnn_potential,
    dropout_masks,
    ensemble_predict,
    hmc_sample,
    mcd_predict,
    mcd_train,
    rff_features,
    sngp_predict,
    spectral_normalize,
    train_ensemble,
    train_sngp,
)
from unalab.baselines.hmc import leapfrog
from unalab.bench import Dataset
from unalab.blr import fit_blr, predict_blr
from unalab.net import MlpSpec, OptimizerConfig, forward, mlp_init
from unalab.numkit import RngStream

from helpers import central_diff, rel_err


def toy(n=30, seed=0):
    r = RngStream(seed)
    X = r.uniform(-1, 1, (n, 1))
    return Dataset(X, np.sin(3 * X[:, 0]) + 0.1 * r.standard_normal(n))


def quick_opt(epochs=100):
    return OptimizerConfig("adam", 1e-2, epochs=epochs)


# -- ensembles ---------------------------------------------------------------------


def test_ensemble_config_validation():
    spec = MlpSpec(1, (4,))
    with pytest.raises(ValueError):
        EnsembleConfig(spec, n_members=1)
    with pytest.raises(ValueError):
        EnsembleConfig(spec, variant="snapshot")
    with pytest.raises(ValueError):
        EnsembleConfig(spec, prior_var=0.0)


def test_anchor_weight():
    spec = MlpSpec(1, (4,))
    assert EnsembleConfig(spec, noise_var=0.3, prior_var=0.3).anchor_weight == 1.0
    assert EnsembleConfig(spec, noise_var=0.1, prior_var=2.0).anchor_weight == 0.05


def test_anchored_loss_at_anchor_is_data_term():
    spec = MlpSpec(1, (4,))
    p = mlp_init(spec, RngStream(0))
    d = toy()
    loss, _ = anchored_loss_and_grad(p, p, d.X, d.y, 3.0)
    r = forward(p, d.X)[0] - d.y
    assert np.isclose(loss, r @ r / len(r))


def test_anchored_gradient():
    for seed in range(5):
        spec = MlpSpec(1, (6, 4), "tanh")
        p = mlp_init(spec, RngStream(seed))
        anchor = mlp_init(spec, RngStream(seed + 50))
        d = toy(8, seed)
        _, g = anchored_loss_and_grad(p, anchor, d.X, d.y, 0.7, 20)
        num = central_diff(lambda v: anchored_loss_and_grad(p.unflatten(v), anchor, d.X, d.y,
                                                            0.7, 20)[0], p.flatten())
        assert rel_err(np.concatenate([a.ravel() for a in g]), num) < 1e-4


@pytest.mark.parametrize("variant", ["vanilla", "bootstrap", "anchored"])
def test_train_ensemble_deterministic(variant):
    cfg = EnsembleConfig(MlpSpec(1, (8,)), 3, variant, optimizer=quick_opt(30))
    a = train_ensemble(toy(), cfg, RngStream(4))
    b = train_ensemble(toy(), cfg, RngStream(4), jobs=2)
    for m1, m2 in zip(a.members, b.members):
        assert np.array_equal(m1.flatten(), m2.flatten())
    assert (a.anchors is not None) == (variant == "anchored")
    assert not np.array_equal(a.members[0].flatten(), a.members[1].flatten())


def test_ensemble_predict_rules():
    spec = MlpSpec(1, (2,))
    one = mlp_init(spec, RngStream(0)).zeros_like()
    three = one.copy()
    one.biases[-1][:] = 1.0
    three.biases[-1][:] = 3.0
    X = np.zeros((4, 1))
    d = ensemble_predict([one, three], X)
    assert np.allclose(d.mean, 2.0) and np.allclose(d.std_epistemic, 1.0)
    assert np.allclose(d.var_total, d.var_epistemic)
    assert np.allclose(ensemble_predict([one, one], X).var_epistemic, 0.0)
    members = [mlp_init(spec, RngStream(s)) for s in range(4)]
    Xr = RngStream(9).standard_normal((5, 1))
    d1, d2 = ensemble_predict(members, Xr), ensemble_predict(members[::-1], Xr)
    assert np.allclose(d1.mean, d2.mean) and np.allclose(d1.var_total, d2.var_total)
    with pytest.raises(ValueError):
        ensemble_predict([one], X)


# -- MC dropout ---------------------------------------------------------------------


def test_mcd_config_validation():
    with pytest.raises(ValueError):
        McdConfig(MlpSpec(1, (4,)), rate=1.0)
    with pytest.raises(ValueError):
        McdConfig(MlpSpec(1, (4,)), n_passes=1)


def test_dropout_mask_keep_rate():
    spec = MlpSpec(1, (200, 100))
    masks = dropout_masks(spec, 50, 0.3, RngStream(0))
    for m in masks:
        keep = (m > 0).mean()
        n = m.size
        assert abs(keep - 0.7) < 3 * np.sqrt(0.21 / n)
        assert np.allclose(m[m > 0], 1 / 0.7)


def test_mcd_no_dropout_limit_and_determinism():
    cfg = McdConfig(MlpSpec(1, (10,)), rate=1e-9, n_passes=5, noise_var=0.2,
                    optimizer=quick_opt(50))
    model = mcd_train(toy(), cfg, RngStream(0))
    X = np.linspace(-1, 1, 7)[:, None]
    d = mcd_predict(model, X, RngStream(1))
    assert np.allclose(d.var_epistemic, 0.0, atol=1e-20)
    assert np.allclose(d.var_total, 0.2)
    cfg = McdConfig(MlpSpec(1, (10,)), rate=0.2, n_passes=20, optimizer=quick_opt(50))
    model = mcd_train(toy(), cfg, RngStream(0))
    a, b = mcd_predict(model, X, RngStream(5)), mcd_predict(model, X, RngStream(5))
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.var_total, b.var_total)
    assert np.all(a.var_epistemic > 0)


# -- SNGP ------------------------------------------------------------------------------


def test_spectral_normalize_cases():
    assert np.allclose(spectral_normalize(np.eye(3), 0.5, 5, RngStream(0)), 0.5 * np.eye(3))
    W = 0.1 * np.diag([1.0, 0.5])
    assert np.array_equal(spectral_normalize(W, 1.0, 5, RngStream(0)), W)
    for seed in range(5):
        W = RngStream(seed).standard_normal((10, 10))
        out = spectral_normalize(W, 1.0, 50, RngStream(seed + 1))
        assert np.linalg.norm(out, 2) <= 1.01
        again = spectral_normalize(out, 1.0, 50, RngStream(seed + 1))
        assert np.allclose(again, out, atol=1e-8)


def test_rff_bound_and_kernel():
    h = RngStream(0).standard_normal((3, 2))
    D = 50
    W = RngStream(1).standard_normal((D, 2))
    b = RngStream(2).uniform(0, 2 * np.pi, D)
    assert np.all(np.abs(rff_features(h, W, b)) <= np.sqrt(2 / D) + 1e-15)
    x, xp = np.array([[0.3, -0.2]]), np.array([[0.9, 0.4]])
    r = RngStream(3)
    vals = []
    for _ in range(10**4):
        W = r.standard_normal((1, 2))
        b = r.uniform(0, 2 * np.pi, 1)
        vals.append((rff_features(x, W, b) @ rff_features(xp, W, b).T).item())
    assert abs(np.mean(vals) - np.exp(-np.sum((x - xp) ** 2) / 2)) < 0.05


def test_train_sngp_spectral_bound_and_prediction():
    cfg = SngpConfig(MlpSpec(1, (16, 16)), norm_bound=0.9, n_rff=64, noise_var=0.05,
                     optimizer=quick_opt(150))
    model = train_sngp(toy(), cfg, RngStream(0))
    for W in model.params.weights[:-1]:
        assert np.linalg.norm(W, 2) <= 0.9 * 1.01
    d = sngp_predict(model, np.linspace(-1, 1, 5)[:, None])
    assert np.all(np.isfinite(d.mean)) and np.all(d.var_total >= 0.05)


# -- HMC -------------------------------------------------------------------------------


def gaussian_potential(q):
    return 0.5 * float(q @ q), q


def test_hmc_standard_normal():
    cfg = HmcConfig(step_size=0.1, n_leapfrog=20, n_iter=5000)
    res = hmc_sample(gaussian_potential, cfg, np.zeros(2), RngStream(0))
    s = res.samples(500)
    assert np.all(np.abs(s.mean(axis=0)) < 0.1)
    assert np.max(np.abs(np.cov(s.T) - np.eye(2))) < 0.15
    assert len(res.trace) == 5000


def test_hmc_tiny_step_always_accepts():
    cfg = HmcConfig(step_size=1e-6, n_leapfrog=1, n_iter=200)
    res = hmc_sample(gaussian_potential, cfg, np.ones(2), RngStream(1))
    assert res.accept_rate > 0.99
    assert np.allclose(res.trace[-1], np.ones(2), atol=1e-3)


def test_leapfrog_energy_drift():
    q0 = np.array([1.0, -0.5])
    p0 = np.array([0.3, 0.8])
    q, p = leapfrog(gaussian_potential, q0, p0, 1e-3, 50, 1.0)
    H0 = 0.5 * q0 @ q0 + 0.5 * p0 @ p0
    H1 = 0.5 * q @ q + 0.5 * p @ p
    assert abs(H1 - H0) <= 1e-3


def test_hmc_rejects_non_finite_energy():
    def potential(q):
        if q[0] > 0.5:
            return np.inf, np.full_like(q, np.nan)
        return 0.5 * float(q @ q), q

    cfg = HmcConfig(step_size=0.2, n_leapfrog=5, n_iter=300)
    res = hmc_sample(potential, cfg, np.zeros(1), RngStream(2))
    assert np.all(res.trace[:, 0] <= 0.5) and not res.accepted.all()


def test_hmc_config_validation():
    with pytest.raises(ValueError):
        HmcConfig(step_size=0.0)
    with pytest.raises(ValueError):
        HmcConfig(n_iter=10, burn_in=10)


def test_bnn_prior_only_variance():
    spec = MlpSpec(1, ())
    empty = Dataset(np.zeros((0, 1)), np.zeros(0))
    U = bnn_potential(spec, empty.X, empty.y, 2.0, 1.0)
    cfg = HmcConfig(step_size=0.3, n_leapfrog=9, n_iter=4000)
    res = hmc_sample(U, cfg, np.zeros(2), RngStream(0))
    var = res.samples(200).var(axis=0)
    assert np.all(np.abs(var / 4.0 - 1) < 0.1)


def test_bnn_hmc_determinism_and_linear_fit():
    r = RngStream(0)
    X = r.uniform(-1, 1, (20, 1))
    y = 1.5 * X[:, 0] - 0.3 + 0.1 * r.standard_normal(20)
    d = Dataset(X, y)
    spec = MlpSpec(1, ())
    cfg = HmcConfig(step_size=0.02, n_leapfrog=20, n_iter=1500, burn_in=300, thin=2,
                    prior_sd=1.0, noise_sd=0.1)
    dist, res = bnn_hmc_predict(spec, d, cfg, RngStream(1), X, return_result=True)
    dist2, res2 = bnn_hmc_predict(spec, d, cfg, RngStream(1), X, return_result=True)
    assert np.array_equal(res.trace, res2.trace)
    post = predict_blr(fit_blr(np.hstack([X, np.ones((20, 1))]), y, 1.0, 0.01),
                       np.hstack([X, np.ones((20, 1))]))
    assert np.all(np.abs(dist.mean - post.mean) < 2 * post.std_epistemic + 1e-3)
    assert np.all(np.abs(dist.mean - y) < 3 * dist.std_total)
