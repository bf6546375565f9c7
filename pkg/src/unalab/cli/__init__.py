"""Command-line experiment driver.

Every command resolves a strict JSON config (file, then flag overrides),
writes its outputs into ``--out`` and finishes with a ``manifest.json``
that ``unalab rerun`` can replay.  Exit codes: 0 success, 1 runtime
error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .. import bench, plotting
from ..bayesopt import OBJECTIVES, GpSurrogate, ModelSurrogate, bayesopt_loop
from ..bench import Dataset, RubConfig, format_float
from ..blr import avg_log_likelihood, rmse, PredictiveDist
from ..models import KINDS, ConfigError, FittedModel, ModelFormatError, fit_model, resolve_config
from ..numkit import RngStream
from .manifest import read_manifest, write_manifest

log = logging.getLogger("unalab")

SEED_ENV = "UNA_LAB_SEED"
REQUIRED = object()
GENERATORS = ("cubic-gap", "squiggle", "radial-shell", "uci-gap")
PRED_COLUMNS = ["mean", "std_total", "std_epistemic"]

SCHEMAS = {
    "dataset": {"gen": REQUIRED, "n": None, "noise_sd": 3.0, "region": "notgap", "dim": 1,
                "in": None, "feature": None, "target": -1, "header": False},
    "train": {"model": REQUIRED, "data": REQUIRED, "target": -1, "header": True,
              "model_config": {}, "predict_on": None, "grid": None},
    "predict": {"model_file": REQUIRED, "data": REQUIRED, "target": -1, "header": True,
                "has_target": True},
    "rub": {"model": "gp", "model_config": {}, "dim": 1, "n": None, "n_rays": 1000,
            "r_max": 3.0, "n_radii": 100, "kind": "epistemic"},
    "bayesopt": {"objective": "branin", "surrogate": "gp", "steps": 50, "n_init": 5,
                 "restarts": 10, "candidates": 2000, "model_config": {}},
    "report": {"gap": REQUIRED, "notgap": REQUIRED, "gap_data": None, "notgap_data": None},
}


# -- config --------------------------------------------------------------------------


def _load_json_object(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"--config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config: invalid JSON in {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"--config: {path} must hold a JSON object")
    return doc


def _set_dotted(target: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        target = target.setdefault(k, {})
        if not isinstance(target, dict):
            raise ConfigError(f"--set: {dotted} does not name a nested key")
    target[keys[-1]] = value


def _parse_set(items) -> dict:
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_dotted(out, key.strip(), value)
    return out


def _deep_update(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def resolve_seed(flag, file_value) -> int:
    for source, value in (("--seed", flag), ("config seed", file_value)):
        if value is not None:
            return _as_seed(value, source)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        return _as_seed(env.strip(), SEED_ENV)
    return 0


def _as_seed(value, source) -> int:
    try:
        seed = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{source}: seed must be an integer, got {value!r}") from None
    if seed < 0:
        raise ConfigError(f"{source}: seed must be non-negative")
    return seed


def resolve_command_config(command: str, file_cfg: dict, overrides: dict) -> dict:
    schema = SCHEMAS[command]
    merged = _deep_update(file_cfg, {k: v for k, v in overrides.items() if v is not None})
    merged.pop("seed", None)
    unknown = sorted(set(merged) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    out = {}
    for key, default in schema.items():
        if key in merged:
            out[key] = merged[key]
        elif default is REQUIRED:
            raise ConfigError(f"--{key.replace('_', '-')} is required for {command}")
        else:
            out[key] = copy.deepcopy(default)
    return out


# -- I/O helpers -------------------------------------------------------------------------


def _write_predictions(path: Path, X, dist: PredictiveDist) -> None:
    names = [f"x{j + 1}" for j in range(X.shape[1])] + PRED_COLUMNS
    cols = np.column_stack([X, dist.mean, dist.std_total, dist.std_epistemic])
    bench.write_matrix(path, cols, names)


def _read_predictions(path) -> tuple[list[str], np.ndarray]:
    names, M = bench.read_matrix(path, header=True)
    if names is None or names[-3:] != PRED_COLUMNS:
        raise ConfigError(f"{path}: not a prediction file (expected columns ending in "
                          f"{', '.join(PRED_COLUMNS)})")
    return names, M


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _int(cfg, key, lo=None):
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"--{key.replace('_', '-')} must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"--{key.replace('_', '-')} must be >= {lo}")
    return v


# -- commands ----------------------------------------------------------------------------


def cmd_dataset(cfg, seed, out: Path, jobs) -> list[str]:
    gen = cfg["gen"]
    if gen not in GENERATORS:
        raise ConfigError(f"--gen: unknown generator {gen!r}; choose from {', '.join(GENERATORS)}")
    stream = RngStream(seed)
    n = cfg["n"]
    if gen == "uci-gap":
        if cfg["in"] is None or cfg["feature"] is None:
            raise ConfigError("--in and --feature are required for --gen uci-gap")
        data = bench.load_csv(cfg["in"], _int(cfg, "target"), bool(cfg["header"]))
        if not 0 <= _int(cfg, "feature") < data.dim:
            raise ConfigError(f"--feature: index {cfg['feature']} out of range (0..{data.dim - 1})")
        parts = bench.uci_gap_transform(data, cfg["feature"])
        bench.save_csv(parts["train"], out / "train.csv")
        bench.save_csv(parts["gap"], out / "gap.csv")
        return ["train.csv", "gap.csv"]
    if n is not None:
        _int(cfg, "n", 1)
    if gen == "cubic-gap":
        data = bench.gen_cubic_gap(stream, n or 100, cfg["noise_sd"])
    elif gen == "squiggle":
        try:
            data = bench.gen_squiggle(stream, cfg["region"], n or 100, cfg["noise_sd"])
        except ValueError as exc:
            raise ConfigError(f"--region: {exc}") from None
    else:
        dim = _int(cfg, "dim", 1)
        if n is None and dim not in bench.SHELL_COUNTS:
            raise ConfigError("--n is required for radial-shell beyond three dimensions")
        data = bench.gen_radial_shell(dim, stream, n)
    bench.save_csv(data, out / "dataset.csv")
    return ["dataset.csv"]


def _grid_inputs(grid) -> np.ndarray:
    if not (isinstance(grid, list) and len(grid) == 3):
        raise ConfigError("--grid expects lo,hi,n")
    lo, hi, n = grid
    return np.linspace(float(lo), float(hi), int(n))[:, None]


def cmd_train(cfg, seed, out: Path, jobs) -> list[str]:
    kind = cfg["model"]
    if kind not in KINDS:
        raise ConfigError(f"--model: unknown model kind {kind!r}; choose from {', '.join(KINDS)}")
    cfg["model_config"] = resolve_config(kind, cfg["model_config"])
    data = bench.load_csv(cfg["data"], _int(cfg, "target"), bool(cfg["header"]))
    model = fit_model(kind, cfg["model_config"], data, seed, jobs)
    (out / "model.json").write_text(model.to_json() + "\n", encoding="utf-8")
    if cfg["grid"] is not None:
        if data.dim != 1:
            raise ConfigError("--grid only applies to one-dimensional inputs")
        Xp = _grid_inputs(cfg["grid"])
    elif cfg["predict_on"] is not None:
        Xp = bench.load_csv(cfg["predict_on"], cfg["target"], bool(cfg["header"])).X
    else:
        Xp = data.X
    dist = model.predict(Xp)
    _write_predictions(out / "predictions.csv", Xp, dist)
    outputs = ["model.json", "predictions.csv"]
    if data.dim == 1:
        plotting.predictive_band(out / "predictive.svg", Xp[:, 0], dist.mean, dist.std_total,
                                 dist.std_epistemic, data.X, data.y, title=kind)
        outputs.append("predictive.svg")
    return outputs


def cmd_predict(cfg, seed, out: Path, jobs) -> list[str]:
    try:
        model = FittedModel.from_json(Path(cfg["model_file"]).read_text(encoding="utf-8"))
    except (ModelFormatError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"--model-file: {exc}") from None
    if cfg["has_target"]:
        X = bench.load_csv(cfg["data"], _int(cfg, "target"), bool(cfg["header"])).X
    else:
        _, X = bench.read_matrix(cfg["data"], bool(cfg["header"]))
    _write_predictions(out / "predictions.csv", X, model.predict(X))
    return ["predictions.csv"]


def cmd_rub(cfg, seed, out: Path, jobs) -> list[str]:
    kind = cfg["model"]
    if kind not in KINDS:
        raise ConfigError(f"--model: unknown model kind {kind!r}")
    cfg["model_config"] = resolve_config(kind, cfg["model_config"])
    try:
        rc = RubConfig(_int(cfg, "dim", 1), _int(cfg, "n_rays"), float(cfg["r_max"]),
                       _int(cfg, "n_radii"), cfg["kind"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    stream = RngStream(seed)
    data = bench.gen_radial_shell(rc.dim, stream.split(0), cfg["n"])
    model = fit_model(kind, cfg["model_config"], data, stream.split(1).seed, jobs)
    report = rub_model_report(model, rc, stream.split(2))
    bench.write_matrix(out / "rub.csv", np.column_stack([report.radius, report.mean_std,
                                                          report.std_std]),
                       ["radius", "mean_std", "std_std"])
    summary = {**report.summary(), **bench.rub_ideal_score(report, rc.dim), "model": kind,
               "dim": rc.dim}
    _write_json(out / "rub.json", summary)
    plotting.rub_profile(out / "rub.svg", report.radius, report.mean_std, report.std_std,
                         0.5**rc.dim, title=f"{kind}, D={rc.dim}")
    return ["rub.csv", "rub.json", "rub.svg"]


def rub_model_report(model: FittedModel, rc: RubConfig, stream: RngStream):
    """Run the benchmark on raw inputs, reporting stds on the normalised target scale."""
    def normalized(X):
        return model.predict_normalized(model.stats.transform_x(X))
    return bench.rub_run(normalized, rc, stream)


def _surrogate(name: str, model_config: dict):
    if name == "gp":
        if model_config:
            raise ConfigError("--set: the gp surrogate takes no model config")
        return GpSurrogate()
    if name not in KINDS:
        raise ConfigError(f"--surrogate: unknown surrogate {name!r}")
    cfg = resolve_config(name, model_config)
    return ModelSurrogate(lambda data, stream: fit_model(name, cfg, data, stream.seed).predict)


def cmd_bayesopt(cfg, seed, out: Path, jobs) -> list[str]:
    name = cfg["objective"]
    if name not in OBJECTIVES:
        raise ConfigError(f"--objective: unknown objective {name!r}; "
                          f"choose from {', '.join(OBJECTIVES)}")
    objective = OBJECTIVES[name]
    restarts = _int(cfg, "restarts", 1)
    steps, n_init = _int(cfg, "steps", 0), _int(cfg, "n_init", 1)
    cands = _int(cfg, "candidates", 1)
    _surrogate(cfg["surrogate"], cfg["model_config"])  # validate before any work
    master = RngStream(seed)

    def run(r):
        sur = _surrogate(cfg["surrogate"], cfg["model_config"])
        return bayesopt_loop(objective, sur, n_init, steps, master.split(r), cands)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(run, range(restarts)))
    else:
        results = [run(r) for r in range(restarts)]
    outputs = []
    for r, res in enumerate(results):
        name_r = f"bo_restart_{r:02d}.csv"
        names = ["step"] + [f"x{j + 1}" for j in range(objective.dim)] + ["f", "best_error"]
        steps_col = np.arange(len(res.f)) - res.n_init + 1
        bench.write_matrix(out / name_r, np.column_stack([steps_col, res.X, res.f, res.best_error]),
                           names)
        outputs.append(name_r)
    finals = np.array([res.final_error for res in results])
    summary = {
        "objective": name, "surrogate": cfg["surrogate"], "restarts": restarts,
        "steps": steps, "n_init": n_init, "final_errors": finals.tolist(),
        "mean_final_error": float(finals.mean()), "std_final_error": float(finals.std()),
        "table": f"{finals.mean():.2f} ± {finals.std():.2f}",
    }
    _write_json(out / "summary.json", summary)
    plotting.bo_traces(out / "bo.svg", [res.best_error for res in results],
                       title=f"{name}, {cfg['surrogate']} surrogate")
    return outputs + ["summary.json", "bo.svg"]


def _as_list(v, key):
    if v is None:
        return None
    if isinstance(v, str):
        return [v]
    if not isinstance(v, list) or not v:
        raise ConfigError(f"--{key.replace('_', '-')} expects one or more files")
    return v


def cmd_report(cfg, seed, out: Path, jobs) -> list[str]:
    gaps, notgaps = _as_list(cfg["gap"], "gap"), _as_list(cfg["notgap"], "notgap")
    if len(gaps) != len(notgaps):
        raise ConfigError("--gap and --notgap need the same number of files")
    rows, percents = [], []
    for i, (g, ng) in enumerate(zip(gaps, notgaps)):
        gn, G = _read_predictions(g)
        nn, NG = _read_predictions(ng)
        if gn != nn:
            raise ConfigError(f"prediction files {g} and {ng} have different columns")
        gap_u, base_u = float(G[:, -1].mean()), float(NG[:, -1].mean())
        pct = bench.percent_increase(gap_u, base_u)
        percents.append(pct)
        rows.append([i, gap_u, base_u, pct])
    mean, std, detected = bench.gap_detected(percents)
    names = ["run", "gap_mean_epistemic_std", "notgap_mean_epistemic_std", "percent_increase"]
    bench.write_matrix(out / "report.csv", np.array(rows, dtype=float), names)
    summary = {"runs": len(rows), "mean_percent": mean, "std_percent": std, "detected": detected,
               "table": f"{mean:.1f} ± {std:.1f}"}
    outputs = ["report.csv"]
    metric_rows = []
    for split, preds, data_files in (("gap", gaps, cfg["gap_data"]),
                                     ("notgap", notgaps, cfg["notgap_data"])):
        data_files = _as_list(data_files, f"{split}_data")
        if data_files is None:
            continue
        if len(data_files) not in (1, len(preds)):
            raise ConfigError(f"--{split}-data needs one file or one per prediction file")
        for i, p in enumerate(preds):
            _, P = _read_predictions(p)
            d = bench.load_csv(data_files[min(i, len(data_files) - 1)], -1, True)
            if len(d) != len(P):
                raise ConfigError(f"{p} has {len(P)} rows but its data file has {len(d)}")
            dist = PredictiveDist(P[:, -3], P[:, -2] ** 2, P[:, -1] ** 2)
            metric_rows.append([i, 0.0 if split == "gap" else 1.0, rmse(dist, d.y),
                                avg_log_likelihood(dist, d.y)])
    if metric_rows:
        bench.write_matrix(out / "metrics.csv", np.array(metric_rows),
                           ["run", "split_is_notgap", "rmse", "avg_log_likelihood"])
        outputs.append("metrics.csv")
    _write_json(out / "report.json", summary)
    plotting.ratio_bars(out / "report.svg", percents, mean, std)
    return outputs + ["report.json", "report.svg"]


COMMANDS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "predict": cmd_predict,
    "rub": cmd_rub,
    "bayesopt": cmd_bayesopt,
    "report": cmd_report,
}


# -- argument parsing ------------------------------------------------------------------


def _grid(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected lo,hi,n")
    try:
        return [float(parts[0]), float(parts[1]), int(parts[2])]
    except ValueError:
        raise argparse.ArgumentTypeError("expected lo,hi,n") from None


def _bool(text):
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError("expected true/false")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override its keys)")
    common.add_argument("--seed", help=f"master seed (falls back to ${SEED_ENV}, then 0)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="unalab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", parents=[common], help="generate or split a dataset")
    p.add_argument("--gen")
    p.add_argument("--n", type=int)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--region")
    p.add_argument("--dim", type=int)
    p.add_argument("--in", dest="in_")
    p.add_argument("--feature", type=int)
    p.add_argument("--target", type=int)
    p.add_argument("--header", type=_bool)

    def model_flags(p, model_flag="--model"):
        p.add_argument(model_flag)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a model config key (dotted, JSON value)")

    p = sub.add_parser("train", parents=[common], help="train a model and predict")
    model_flags(p)
    p.add_argument("--data")
    p.add_argument("--target", type=int)
    p.add_argument("--header", type=_bool)
    p.add_argument("--predict-on")
    p.add_argument("--grid", type=_grid)

    p = sub.add_parser("predict", parents=[common], help="predict with a saved model")
    p.add_argument("--model-file")
    p.add_argument("--data")
    p.add_argument("--target", type=int)
    p.add_argument("--header", type=_bool)
    p.add_argument("--has-target", type=_bool)

    p = sub.add_parser("rub", parents=[common], help="radial uncertainty benchmark")
    model_flags(p)
    p.add_argument("--dim", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--n-rays", type=int)
    p.add_argument("--r-max", type=float)
    p.add_argument("--n-radii", type=int)
    p.add_argument("--kind", choices=["epistemic", "total"])

    p = sub.add_parser("bayesopt", parents=[common], help="Bayesian optimisation runs")
    p.add_argument("--objective")
    p.add_argument("--surrogate")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--steps", type=int)
    p.add_argument("--n-init", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--candidates", type=int)

    p = sub.add_parser("report", parents=[common], help="gap / not-gap uncertainty report")
    p.add_argument("--gap", nargs="+")
    p.add_argument("--notgap", nargs="+")
    p.add_argument("--gap-data", nargs="+")
    p.add_argument("--notgap-data", nargs="+")

    p = sub.add_parser("rerun", help="replay a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=".")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


_SKIP = {"command", "config", "seed", "out", "jobs", "verbose", "set", "in_"}


def _overrides(args) -> dict:
    ov = {k: v for k, v in vars(args).items() if k not in _SKIP}
    if getattr(args, "in_", None) is not None:
        ov["in"] = args.in_
    if getattr(args, "set", None):
        ov["model_config"] = _parse_set(args.set)
    return ov


def run_command(command: str, cfg: dict, seed: int, out: Path, jobs: int) -> list[str]:
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    outputs = COMMANDS[command](cfg, seed, out, jobs)
    write_manifest(out, command, cfg, seed, outputs, time.perf_counter() - t0)
    return outputs


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            try:
                doc = read_manifest(args.manifest)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"manifest: {exc}") from None
            if doc["command"] not in COMMANDS:
                raise ConfigError(f"manifest: unknown command {doc['command']!r}")
            cfg = resolve_command_config(doc["command"], doc["config"], {})
            run_command(doc["command"], cfg, _as_seed(doc["seed"], "manifest"), Path(args.out),
                        args.jobs)
            return 0
        file_cfg = _load_json_object(args.config) if args.config else {}
        seed = resolve_seed(args.seed, file_cfg.get("seed"))
        cfg = resolve_command_config(args.command, file_cfg, _overrides(args))
        run_command(args.command, cfg, seed, Path(args.out), args.jobs)
        return 0
    except ConfigError as exc:
        print(f"unalab: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError, np.linalg.LinAlgError) as exc:
        print(f"unalab: runtime error: {exc}", file=sys.stderr)
        return 1
