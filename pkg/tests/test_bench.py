import json

import numpy as np
import pytest
from scipy import stats as sps

from unalab.bench import (
    SHELL_COUNTS,
    CsvFormatError,
    Dataset,
    RubConfig,
    cubic,
    denormalize_dataset,
    denormalize_dist,
    epistemic_gap_ratio,
    gap_detected,
    gen_cubic_gap,
    gen_radial_shell,
    gen_squiggle,
    load_csv,
    normalize,
    percent_increase,
    ray_directions,
    read_matrix,
    rub_ideal_score,
    rub_run,
    save_csv,
    squiggle,
    transfer_eval,
    uci_gap_transform,
)
from unalab.blr import PredictiveDist, avg_log_likelihood, fit_blr, predict_blr
from unalab.net import MlpSpec, features, mlp_init
from unalab.numkit import RngStream


def field(fn, noise=0.0):
    """Synthetic model whose epistemic std is ``fn(x)``."""

    def model(X):
        u = fn(np.asarray(X))
        return PredictiveDist(np.zeros(len(X)), u**2 + noise, u**2)

    return model


# -- generators ---------------------------------------------------------------------


def test_cubic_gap_shape_and_support():
    d = gen_cubic_gap(RngStream(0))
    assert len(d) == 100 and d.dim == 1
    x = d.X[:, 0]
    assert not np.any((x > -2) & (x < 2))
    assert np.all(np.abs(x) <= 4)
    assert np.sum(x < 0) == 50


def test_cubic_gap_noise_statistics():
    r = RngStream(3)
    resid = np.concatenate([(lambda d: d.y - cubic(d.X[:, 0]))(gen_cubic_gap(r))
                            for _ in range(10**4)])
    assert abs(resid.mean()) < 0.1
    assert abs(resid.std() / 3.0 - 1) < 0.05


def test_generators_pure_in_seed():
    a, b = gen_cubic_gap(RngStream(7)), gen_cubic_gap(RngStream(7))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    a, b = gen_radial_shell(3, RngStream(7)), gen_radial_shell(3, RngStream(7))
    assert np.array_equal(a.X, b.X)
    assert not np.array_equal(gen_cubic_gap(RngStream(8)).X, gen_cubic_gap(RngStream(7)).X)


def test_squiggle_values_and_regions():
    assert squiggle(0.0) == 0.0
    assert abs(squiggle(1.0) - (-3.003)) < 1e-3
    notgap = gen_squiggle(RngStream(0), "notgap")
    gap = gen_squiggle(RngStream(0), "gap")
    assert len(notgap) == len(gap) == 100
    assert np.all(np.abs(notgap.X) >= 2) and np.all(np.abs(gap.X) <= 2)
    with pytest.raises(ValueError):
        gen_squiggle(RngStream(0), "middle")


def test_radial_shell_counts_and_constraint():
    for dim, n in SHELL_COUNTS.items():
        d = gen_radial_shell(dim, RngStream(dim))
        r = np.linalg.norm(d.X, axis=1)
        assert len(d) == n and d.dim == dim
        assert np.all((r >= 1) & (r <= 2))
        assert np.all(np.abs(d.y - r) < 6 * np.sqrt(1e-5))
    assert len(gen_radial_shell(5, RngStream(0), n=17)) == 17
    with pytest.raises(ValueError):
        gen_radial_shell(5, RngStream(0))


class RecordingStream:
    def __init__(self, inner):
        self.inner, self.boxes = inner, []

    def uniform(self, *a, **k):
        out = self.inner.uniform(*a, **k)
        self.boxes.append(out)
        return out

    def standard_normal(self, *a, **k):
        return self.inner.standard_normal(*a, **k)


def test_radial_shell_acceptance_fraction_and_radius_law():
    rec = RecordingStream(RngStream(0))
    d = gen_radial_shell(2, rec, n=60000)
    boxes = np.concatenate(rec.boxes)
    assert len(boxes) >= 10**5
    r = np.linalg.norm(boxes, axis=1)
    assert abs(np.mean((r >= 1) & (r <= 2)) - 3 * np.pi / 16) < 0.01
    # uniform on the annulus: P(r <= t) = (t^2 - 1) / 3
    radii = np.linalg.norm(d.X, axis=1)
    assert sps.kstest(radii, lambda t: (t**2 - 1) / 3).pvalue > 1e-3


# -- normalisation --------------------------------------------------------------------


def test_normalize_round_trip_and_moments():
    d = gen_cubic_gap(RngStream(1))
    n, st = normalize(d)
    assert abs(n.y.mean()) < 1e-12 and abs(n.y.std() - 1) < 1e-12
    back = denormalize_dataset(n, st)
    assert np.allclose(back.X, d.X, atol=1e-12, rtol=0)
    assert np.allclose(back.y, d.y, atol=1e-12 * np.abs(d.y).max(), rtol=0)
    same, _ = normalize(d, st)
    assert np.array_equal(same.y, n.y)


def test_denormalize_dist_scales_std():
    d = gen_cubic_gap(RngStream(1))
    _, st = normalize(d)
    dist = PredictiveDist(np.array([0.0, 1.0]), np.array([1.0, 4.0]), np.array([0.25, 1.0]))
    out = denormalize_dist(dist, st)
    assert np.allclose(out.mean, [st.y_mean, st.y_mean + st.y_std])
    assert np.allclose(out.std_epistemic, dist.std_epistemic * st.y_std)
    assert np.allclose(out.std_total, dist.std_total * st.y_std)


def test_zero_variance_column_passes_through():
    X = np.column_stack([np.arange(5.0), np.full(5, 3.0)])
    n, st = normalize(Dataset(X, np.arange(5.0)))
    assert np.allclose(n.X[:, 1], 0.0)
    assert st.x_std[1] == 1.0 and len(st.warnings) == 1
    with pytest.raises(ValueError):
        normalize(Dataset(np.zeros((1, 1)), np.zeros(1)))


# -- CSV -----------------------------------------------------------------------------------


def test_csv_literal_parse(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1,2\n3.5,-4\n0,1e3\n")
    _, M = read_matrix(p)
    assert np.array_equal(M, [[1, 2], [3.5, -4], [0, 1000]])
    d = load_csv(p)
    assert np.array_equal(d.y, [2, -4, 1000]) and np.array_equal(d.X[:, 0], [1, 3.5, 0])
    d0 = load_csv(p, target=0)
    assert np.array_equal(d0.y, [1, 3.5, 0])


def test_csv_errors_name_location(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1,2\n3,x\n")
    with pytest.raises(CsvFormatError, match="row 2, column 2"):
        read_matrix(p)
    p.write_text("1,2\n3,4,5\n")
    with pytest.raises(CsvFormatError, match="row 2"):
        read_matrix(p)
    p.write_text("1,2\n3,4\n")
    with pytest.raises(CsvFormatError):
        load_csv(p, target=2)


def test_csv_round_trip_byte_stable(tmp_path):
    d = gen_squiggle(RngStream(4))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    save_csv(d, a)
    back = load_csv(a, header=True)
    assert np.array_equal(back.X, d.X) and np.array_equal(back.y, d.y)
    save_csv(back, b)
    assert a.read_bytes() == b.read_bytes()


# -- UCI gap ---------------------------------------------------------------------------


def test_uci_gap_nine_points():
    X = np.array([5, 1, 9, 3, 7, 2, 8, 4, 6], dtype=float)[:, None]
    parts = uci_gap_transform(Dataset(X, X[:, 0] * 10), 0)
    assert np.array_equal(np.sort(parts["gap"].X[:, 0]), [4, 5, 6])
    assert np.array_equal(parts["gap"].y, parts["gap"].X[:, 0] * 10)
    assert np.array_equal(np.sort(parts["train"].X[:, 0]), [1, 2, 3, 7, 8, 9])


def test_uci_gap_sizes_and_partition():
    d = Dataset(RngStream(0).standard_normal((10, 3)), np.arange(10.0))
    parts = uci_gap_transform(d, 1)
    assert len(parts["gap"]) == 4 and len(parts["train"]) == 6
    ids = np.concatenate([parts["train"].index, parts["gap"].index])
    assert np.array_equal(np.sort(ids), np.arange(10))
    assert np.array_equal(parts["gap"].y, parts["gap"].index.astype(float))
    with pytest.raises(ValueError):
        uci_gap_transform(d, 3)
    with pytest.raises(ValueError):
        uci_gap_transform(d.subset([0, 1]), 0)


def test_uci_gap_stable_on_ties():
    X = np.array([1, 1, 1, 1, 1, 1], dtype=float)[:, None]
    parts = uci_gap_transform(Dataset(X, np.arange(6.0)), 0)
    assert np.array_equal(parts["gap"].index, [2, 3])


# -- radial uncertainty benchmark ----------------------------------------------------------


def test_rub_radial_field():
    cfg = RubConfig(3, n_rays=50, r_max=2.0, n_radii=21)
    rep = rub_run(field(lambda X: np.linalg.norm(X, axis=1)), cfg, RngStream(0))
    assert np.allclose(rep.mean_std, cfg.radii)
    assert np.allclose(rep.std_std, 0.0, atol=1e-12)
    assert rep.peak_radius == 2.0 and rep.n_rays == 50


def test_rub_one_dimension_two_rays():
    for R in (2, 10, 1000):
        assert len(ray_directions(1, R, RngStream(0))) == 2
    rep = rub_run(field(lambda X: np.ones(len(X))), RubConfig(1, n_rays=500), RngStream(0))
    assert rep.n_rays == 2


def test_rub_constant_field_and_directions():
    rep = rub_run(field(lambda X: np.full(len(X), 0.3)), RubConfig(2, n_rays=20), RngStream(1))
    assert np.allclose(rep.mean_std, 0.3) and np.isclose(rep.percentile_997, 0.3)
    dirs = ray_directions(4, 100, RngStream(2))
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0)


def test_rub_total_kind():
    m = field(lambda X: np.zeros(len(X)), noise=0.04)
    assert np.allclose(rub_run(m, RubConfig(2, 4, kind="total"), RngStream(0)).mean_std, 0.2)
    assert np.allclose(rub_run(m, RubConfig(2, 4), RngStream(0)).mean_std, 0.0)


def test_rub_invariant_to_doubling_rays():
    def aniso(X):
        return np.linalg.norm(X, axis=1) * (1 + 0.5 * np.cos(np.arctan2(X[:, 1], X[:, 0])))

    a = rub_run(field(aniso), RubConfig(2, n_rays=4000), RngStream(0))
    b = rub_run(field(aniso), RubConfig(2, n_rays=8000), RngStream(1))
    mask = a.radius > 0
    assert np.max(np.abs(b.mean_std[mask] / a.mean_std[mask] - 1)) < 0.02


def test_rub_config_validation():
    with pytest.raises(ValueError):
        RubConfig(2, n_rays=1)
    with pytest.raises(ValueError):
        RubConfig(2, n_radii=1)
    with pytest.raises(ValueError):
        RubConfig(2, kind="aleatoric")


def test_rub_report_summary_serialises():
    rep = rub_run(field(lambda X: np.ones(len(X))), RubConfig(2, 5), RngStream(0))
    assert set(json.loads(json.dumps(rep.summary()))) >= {"percentile_99_7", "peak_radius"}


def test_rub_ideal_score():
    rep = rub_run(field(lambda X: np.full(len(X), 0.5)), RubConfig(1), RngStream(0))
    s = rub_ideal_score(rep, 1)
    assert s["ideal"] == 0.5 and np.isclose(s["ratio"], 1.0)
    assert rub_ideal_score(rep, 3)["ideal"] == 0.125
    with pytest.raises(ValueError):
        rub_ideal_score(rep, 0)


# -- transfer and gap metrics ----------------------------------------------------------


def test_transfer_refit_beats_notgap_posterior():
    for seed in range(5):
        r = RngStream(seed)
        p = mlp_init(MlpSpec(1, (20,), "tanh"), r.split(0))
        notgap, _ = normalize(gen_squiggle(r.split(1), "notgap"))
        gap = gen_squiggle(r.split(2), "gap", n=50)
        gap = Dataset(notgap.stats.transform_x(gap.X), notgap.stats.transform_y(gap.y))

        def fn(X):
            return features(p, X)

        refit = transfer_eval(fn, gap, gap, 1.0, 0.1)
        frozen = avg_log_likelihood(predict_blr(fit_blr(fn(notgap.X), notgap.y, 1.0, 0.1),
                                                fn(gap.X)), gap.y)
        assert refit >= frozen
        assert transfer_eval(fn, gap, gap, 1.0, 0.1) == refit


def test_transfer_constant_features():
    d = gen_squiggle(RngStream(0), "gap", n=20)
    post_fn = lambda X: np.ones((len(X), 1))  # noqa: E731
    ll = transfer_eval(post_fn, d, d, 1.0, 1.0)
    dist = predict_blr(fit_blr(post_fn(d.X), d.y, 1.0, 1.0), post_fn(d.X))
    assert np.ptp(dist.mean) == 0 and np.isfinite(ll)


def test_gap_ratio_and_detection():
    gap = Dataset(np.full((3, 1), 2.0), np.zeros(3))
    notgap = Dataset(np.full((4, 1), 1.0), np.zeros(4))
    assert epistemic_gap_ratio(field(lambda X: np.ones(len(X))), gap, notgap) == 0.0
    assert np.isclose(epistemic_gap_ratio(field(lambda X: X[:, 0]), gap, notgap), 100.0)
    m = field(lambda X: X[:, 0], noise=0.5)
    assert np.isclose(epistemic_gap_ratio(m, gap, notgap, noise_var=0.5), 100.0)
    with pytest.raises(ZeroDivisionError):
        percent_increase(1.0, 0.0)
    with pytest.raises(ValueError):
        epistemic_gap_ratio(m, gap.subset([]), notgap)
    assert gap_detected([5.0, 15.0])[2]
    mean, std, flag = gap_detected([-10.0, 30.0])
    assert (mean, std, flag) == (10.0, 20.0, False)
