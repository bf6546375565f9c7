"""Deterministic SVG figures (matplotlib, Agg backend).

Each plotted series carries a ``gid`` (``series-mean``, ``series-band``,
``series-ideal``...) so the SVG can be inspected structurally.  Dates and
random hash salts are pinned, so identical data give identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "svg.hashsalt": "unalab",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 10,
}
FIGSIZE = (800 / 72, 500 / 72)  # SVG units are points, so the viewBox is 800x500


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def rub_profile(path, radius, mean_std, std_std, ideal: float | None = None,
                title: str = "Radial uncertainty profile") -> None:
    """Per-radius mean uncertainty with a one-std band and the ideal level."""
    radius = np.asarray(radius, dtype=float)
    mean_std = np.asarray(mean_std, dtype=float)
    std_std = np.asarray(std_std, dtype=float)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=FIGSIZE, dpi=100)
        band = ax.fill_between(radius, mean_std - std_std, mean_std + std_std, alpha=0.25,
                               color="tab:blue", linewidth=0, label="+/- 1 std")
        band.set_gid("series-band")
        (line,) = ax.plot(radius, mean_std, color="tab:blue", label="mean epistemic std")
        line.set_gid("series-mean")
        if ideal is not None:
            ref = ax.axhline(ideal, color="black", linestyle="--", label=f"ideal {ideal:g}")
            ref.set_gid("series-ideal")
        ax.axvspan(1.0, 2.0, color="0.9", zorder=0).set_gid("data-shell")
        ax.set_xlabel("radius")
        ax.set_ylabel("uncertainty (std)")
        ax.set_title(title)
        ax.legend(loc="upper right")
        _save(fig, path)


def predictive_band(path, x, mean, std_total, std_epistemic, X_train=None, y_train=None,
                    title: str = "Posterior predictive") -> None:
    """1-D predictive mean with total and epistemic two-std bands."""
    order = np.argsort(np.asarray(x, dtype=float))
    x, mean = np.asarray(x)[order], np.asarray(mean)[order]
    st, se = np.asarray(std_total)[order], np.asarray(std_epistemic)[order]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=FIGSIZE, dpi=100)
        ax.fill_between(x, mean - 2 * st, mean + 2 * st, color="tab:orange", alpha=0.2,
                        linewidth=0, label="total").set_gid("series-band-total")
        ax.fill_between(x, mean - 2 * se, mean + 2 * se, color="tab:blue", alpha=0.3,
                        linewidth=0, label="epistemic").set_gid("series-band")
        ax.plot(x, mean, color="tab:blue", label="mean")[0].set_gid("series-mean")
        if X_train is not None:
            ax.scatter(np.ravel(X_train), y_train, s=8, color="black",
                       label="data").set_gid("series-data")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_title(title)
        ax.legend(loc="upper left")
        _save(fig, path)


def bo_traces(path, traces, title: str = "Best-so-far error") -> None:
    """One running-minimum error curve per restart, log scale when positive."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=FIGSIZE, dpi=100)
        for i, tr in enumerate(traces):
            tr = np.asarray(tr, dtype=float)
            ax.plot(np.arange(len(tr)), tr, linewidth=1)[0].set_gid(f"series-restart-{i}")
        flat = np.concatenate([np.asarray(t, dtype=float) for t in traces]) if traces else []
        if len(flat) and np.all(flat > 0):
            ax.set_yscale("log")
        ax.set_xlabel("evaluation")
        ax.set_ylabel("best error")
        ax.set_title(title)
        _save(fig, path)


def ratio_bars(path, percents, mean: float, std: float,
               title: str = "Gap / not-gap epistemic uncertainty") -> None:
    """Per-run percent increase with the across-run mean and one-std band."""
    percents = np.asarray(percents, dtype=float)
    runs = np.arange(len(percents))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=FIGSIZE, dpi=100)
        for i, patch in enumerate(ax.bar(runs, percents, color="tab:blue").patches):
            patch.set_gid(f"series-run-{i}")
        ax.axhspan(mean - std, mean + std, color="tab:orange", alpha=0.2).set_gid("series-band")
        ax.axhline(mean, color="tab:orange").set_gid("series-mean")
        ax.axhline(0.0, color="black", linewidth=0.8).set_gid("series-zero")
        ax.set_xticks(runs)
        ax.set_xlabel("run")
        ax.set_ylabel("percent increase")
        ax.set_title(title)
        _save(fig, path)
