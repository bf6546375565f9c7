"""Datasets, normalisation, CSV I/O and the uncertainty benchmarks."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from math import ceil
from pathlib import Path
from typing import Callable

import numpy as np

from .blr import PredictiveDist, avg_log_likelihood, fit_blr, predict_blr
from .numkit import RngStream

log = logging.getLogger(__name__)


class CsvFormatError(ValueError):
    pass


@dataclass
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["x_mean"]), np.array(d["x_std"]), d["y_mean"], d["y_std"])

    def transform_x(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def transform_y(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    stats: NormStats | None = None
    index: np.ndarray | None = None  # original row ids, kept through splits

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=float)
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} inputs but {len(self.y)} targets")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")
        if self.index is None:
            self.index = np.arange(len(self.y))

    def __len__(self):
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.X[rows], self.y[rows], self.stats, self.index[rows])


# -- synthetic generators -----------------------------------------------------


def cubic(x):
    return np.asarray(x, dtype=float) ** 3


def squiggle(x):
    x = np.asarray(x, dtype=float)
    return x**3 + 20.0 * np.exp(-(x**2)) * np.sin(10.0 * x)


def _two_bands(stream: RngStream, n: int) -> np.ndarray:
    half = n // 2
    return np.concatenate([stream.uniform(-4, -2, half), stream.uniform(2, 4, n - half)])


def gen_cubic_gap(stream: RngStream, n: int = 100, noise_sd: float = 3.0) -> Dataset:
    """x uniform on [-4,-2] and [2,4] (half each), y = x^3 + N(0, noise_sd^2)."""
    x = _two_bands(stream, n)
    return Dataset(x[:, None], cubic(x) + noise_sd * stream.standard_normal(n))


def gen_squiggle(stream: RngStream, region: str = "notgap", n: int = 100,
                 noise_sd: float = 3.0) -> Dataset:
    """Cubic plus a localised sine bump; ``region`` is ``notgap`` or ``gap``."""
    region = region.lower().replace("_", "").replace("-", "")
    if region == "notgap":
        x = _two_bands(stream, n)
    elif region == "gap":
        x = stream.uniform(-2, 2, n)
    else:
        raise ValueError(f"unknown squiggle region {region!r}")
    return Dataset(x[:, None], squiggle(x) + noise_sd * stream.standard_normal(n))


SHELL_COUNTS = {1: 50, 2: 200, 3: 500}
SHELL_NOISE_VAR = 1e-5


def gen_radial_shell(dim: int, stream: RngStream, n: int | None = None) -> Dataset:
    """Rejection-sample the shell 1 <= |x| <= 2 from the box [-2, 2]^D.

    Targets are ``|x| + N(0, 1e-5)``.
    """
    if n is None:
        if dim not in SHELL_COUNTS:
            raise ValueError(f"no default sample count for dimension {dim}")
        n = SHELL_COUNTS[dim]
    accepted = []
    count = 0
    while count < n:
        box = stream.uniform(-2.0, 2.0, (max(64, 2 * n), dim))
        r = np.linalg.norm(box, axis=1)
        keep = box[(r >= 1.0) & (r <= 2.0)]
        accepted.append(keep)
        count += len(keep)
    X = np.concatenate(accepted)[:n]
    y = np.linalg.norm(X, axis=1) + np.sqrt(SHELL_NOISE_VAR) * stream.standard_normal(n)
    return Dataset(X, y)


# -- normalisation ------------------------------------------------------------


def fit_stats(dataset: Dataset) -> NormStats:
    if len(dataset) < 2:
        raise ValueError("normalisation needs at least two rows")
    warnings = []
    x_mean = dataset.X.mean(axis=0)
    x_std = dataset.X.std(axis=0)
    for j in np.flatnonzero(x_std == 0):
        warnings.append(f"feature {j} has zero variance; left unscaled")
        x_std[j] = 1.0
    y_mean = float(dataset.y.mean())
    y_std = float(dataset.y.std())
    if y_std == 0:
        warnings.append("target has zero variance; left unscaled")
        y_std = 1.0
    for w in warnings:
        log.warning(w)
    return NormStats(x_mean, x_std, y_mean, y_std, warnings)


def normalize(dataset: Dataset, stats: NormStats | None = None) -> tuple[Dataset, NormStats]:
    """Z-score inputs and target (with ``stats`` if given, else fitted here)."""
    stats = stats or fit_stats(dataset)
    out = Dataset(stats.transform_x(dataset.X), stats.transform_y(dataset.y), stats,
                  dataset.index.copy())
    return out, stats


def denormalize_dataset(dataset: Dataset, stats: NormStats) -> Dataset:
    return Dataset(dataset.X * stats.x_std + stats.x_mean,
                   dataset.y * stats.y_std + stats.y_mean, None, dataset.index.copy())


def denormalize_dist(dist: PredictiveDist, stats: NormStats) -> PredictiveDist:
    s2 = stats.y_std**2
    return PredictiveDist(dist.mean * stats.y_std + stats.y_mean,
                          dist.var_total * s2, dist.var_epistemic * s2)


# -- CSV ------------------------------------------------------------------------


def read_matrix(path, header: bool = False) -> tuple[list[str] | None, np.ndarray]:
    """Parse a rectangular numeric CSV; errors name the offending row/column."""
    rows, names = [], None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and names is None:
                names = [c.strip() for c in row]
                continue
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: non-numeric cell {cell!r} at row {lineno}, column {col}"
                    ) from None
            if rows and len(vals) != len(rows[0]):
                raise CsvFormatError(
                    f"{path}: row {lineno} has {len(vals)} columns, expected {len(rows[0])}"
                )
            rows.append(vals)
    if not rows:
        return names, np.zeros((0, len(names) if names else 0))
    return names, np.array(rows, dtype=float)


def format_float(v: float) -> str:
    return repr(float(v))


def write_matrix(path, matrix, header: list[str] | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header is not None:
            writer.writerow(header)
        for row in np.atleast_2d(matrix):
            writer.writerow([format_float(v) for v in row])


def load_csv(path, target: int = -1, header: bool = False) -> Dataset:
    """Load a dataset; ``target`` is the column index of y (negative allowed)."""
    _, M = read_matrix(path, header)
    ncol = M.shape[1]
    if ncol < 2:
        raise CsvFormatError(f"{path}: need at least two columns, found {ncol}")
    if not -ncol <= target < ncol:
        raise CsvFormatError(f"{path}: target column {target} out of range (0..{ncol - 1})")
    t = target % ncol
    X = np.delete(M, t, axis=1)
    return Dataset(X, M[:, t])


def save_csv(dataset: Dataset, path, header: bool = True) -> None:
    """Write ``x1..xD, y`` columns (target last)."""
    names = [f"x{j + 1}" for j in range(dataset.dim)] + ["y"] if header else None
    write_matrix(path, np.column_stack([dataset.X, dataset.y]), names)


# -- UCI gap ------------------------------------------------------------------


def uci_gap_transform(dataset: Dataset, feature: int) -> dict[str, Dataset]:
    """Stable-sort on ``feature`` and cut out the middle third as the gap.

    The gap holds sorted rows ``[floor(N/3), floor(N/3) + ceil(N/3))``.
    """
    n = len(dataset)
    if n < 3:
        raise ValueError("need at least three rows")
    if not 0 <= feature < dataset.dim:
        raise ValueError(f"feature index {feature} out of range (0..{dataset.dim - 1})")
    order = np.argsort(dataset.X[:, feature], kind="stable")
    start, size = n // 3, ceil(n / 3)
    gap = order[start : start + size]
    train = np.concatenate([order[:start], order[start + size :]])
    return {"train": dataset.subset(train), "gap": dataset.subset(gap)}


# -- radial uncertainty benchmark ------------------------------------------------

ModelFn = Callable[[np.ndarray], PredictiveDist]


@dataclass(frozen=True)
class RubConfig:
    dim: int
    n_rays: int = 1000
    r_max: float = 3.0
    n_radii: int = 100
    kind: str = "epistemic"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be >= 1")
        if self.n_rays < 2:
            raise ValueError("need at least two rays")
        if self.n_radii < 2 or self.r_max <= 0:
            raise ValueError("radius grid must be strictly increasing")
        if self.kind not in ("epistemic", "total"):
            raise ValueError(f"unknown uncertainty kind {self.kind!r}")

    @property
    def radii(self) -> np.ndarray:
        return np.linspace(0.0, self.r_max, self.n_radii)


@dataclass
class RubReport:
    radius: np.ndarray
    mean_std: np.ndarray
    std_std: np.ndarray
    percentile_997: float
    peak_value: float
    peak_radius: float
    n_rays: int

    def summary(self) -> dict:
        return {
            "percentile_99_7": self.percentile_997,
            "peak_value": self.peak_value,
            "peak_radius": self.peak_radius,
            "n_rays": self.n_rays,
        }


def ray_directions(dim: int, n_rays: int, stream: RngStream) -> np.ndarray:
    """Unit directions; 1-D uses exactly the two rays -1 and +1."""
    if dim == 1:
        return np.array([[-1.0], [1.0]])
    g = stream.standard_normal((n_rays, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def rub_run(model: ModelFn, config: RubConfig, stream: RngStream) -> RubReport:
    """Profile a model's uncertainty along random rays from the origin."""
    dirs = ray_directions(config.dim, config.n_rays, stream)
    radii = config.radii
    pts = (dirs[:, None, :] * radii[None, :, None]).reshape(-1, config.dim)
    dist = model(pts)
    u = dist.std_epistemic if config.kind == "epistemic" else dist.std_total
    u = u.reshape(len(dirs), len(radii))
    mean = u.mean(axis=0)
    k = int(np.argmax(mean))
    return RubReport(
        radius=radii,
        mean_std=mean,
        std_std=u.std(axis=0),
        percentile_997=float(np.percentile(u, 99.7)),
        peak_value=float(mean[k]),
        peak_radius=float(radii[k]),
        n_rays=len(dirs),
    )


def rub_ideal_score(report: RubReport, dim: int) -> dict:
    """Compare the 99.7th percentile uncertainty against ``1 / 2^D``."""
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    ideal = 0.5**dim
    return {
        "percentile_99_7": report.percentile_997,
        "peak": report.peak_value,
        "ideal": ideal,
        "ratio": report.percentile_997 / ideal,
    }


# -- transfer learning and gap detection ---------------------------------------------


def transfer_eval(feature_fn: Callable[[np.ndarray], np.ndarray], gap_train: Dataset,
                  gap_test: Dataset, prior_var: float, noise_var: float) -> float:
    """Refit only the Bayesian head on ``gap_train`` features; avg LL on ``gap_test``.

    ``feature_fn`` maps inputs to a design matrix with frozen parameters.
    """
    post = fit_blr(feature_fn(gap_train.X), gap_train.y, prior_var, noise_var)
    return avg_log_likelihood(predict_blr(post, feature_fn(gap_test.X)), gap_test.y)


def epistemic_std(dist: PredictiveDist, noise_var: float | None = None) -> np.ndarray:
    """Epistemic std; if ``noise_var`` is given it is subtracted from the total."""
    if noise_var is None:
        return dist.std_epistemic
    return np.sqrt(np.maximum(dist.var_total - noise_var, 0.0))


def epistemic_gap_ratio(model: ModelFn, gap: Dataset, notgap: Dataset,
                        noise_var: float | None = None) -> float:
    """Percent increase of mean epistemic std in the gap over the not-gap set."""
    if len(gap) == 0 or len(notgap) == 0:
        raise ValueError("both sets must be non-empty")
    gap_u = float(np.mean(epistemic_std(model(gap.X), noise_var)))
    base = float(np.mean(epistemic_std(model(notgap.X), noise_var)))
    return percent_increase(gap_u, base)


def percent_increase(gap_mean: float, notgap_mean: float) -> float:
    if notgap_mean <= 0:
        raise ZeroDivisionError("not-gap epistemic uncertainty is zero")
    return 100.0 * (gap_mean / notgap_mean - 1.0)


def gap_detected(percents) -> tuple[float, float, bool]:
    """Mean and (population) std over runs; detection when ``mean - std > 0``."""
    p = np.asarray(percents, dtype=float)
    mean, std = float(p.mean()), float(p.std())
    return mean, std, mean - std > 0
