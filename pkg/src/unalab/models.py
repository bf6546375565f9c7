"""Registry of model kinds: config schema, training, prediction and JSON storage.

Every model trains on z-scored data and predicts on the original scale.
``noise_var`` in configs is given in original target units.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from . import nlm, una
from .baselines import ensembles, hmc, mcd, sngp
from .bench import Dataset, NormStats, denormalize_dist, normalize
from .blr import BlrPosterior, PredictiveDist, predict_blr
from .gp import KernelSpec, Matern52, RBF, gp_fit, gp_grid_search, gp_predict
from .net import MlpParams, MlpSpec, OptimizerConfig, features
from .numkit import RngStream

MODEL_FORMAT = "una-lab-model/1"
REQUIRED = object()


class ConfigError(ValueError):
    """Invalid or incomplete configuration (CLI exit code 2)."""


class ModelFormatError(ValueError):
    pass


OPTIMIZER_DEFAULTS = {"kind": "adam", "lr": 1e-2, "batch_size": 0, "epochs": 2000}
NET_DEFAULTS = {"hidden": [50, 20], "activation": "relu", "optimizer": OPTIMIZER_DEFAULTS}

SCHEMAS: dict[str, dict[str, Any]] = {
    "nlm-map": {**NET_DEFAULTS, "prior_var": 1.0, "noise_var": REQUIRED, "gamma": 1e-2},
    "nlm-mle": {**NET_DEFAULTS, "prior_var": 1.0, "noise_var": REQUIRED},
    "nlm-marginal": {**NET_DEFAULTS, "prior_var": 1.0, "noise_var": REQUIRED, "gamma": 0.0},
    "luna": {
        **NET_DEFAULTS, "prior_var": 1.0, "noise_var": REQUIRED, "gamma": 1e-3,
        "n_heads": 20, "sigma_perturb": 0.5, "pooling": "batch",
        "schedule": {"kind": "sigmoid", "scale": 10.0},
    },
    "tuna": {
        **NET_DEFAULTS, "prior_var": None, "noise_var": REQUIRED, "gamma": 0.0,
        "n_functions": 40, "sigma_x": 0.5, "ref_length_scale": 1.0, "ref_amplitude": 1.0,
    },
    "gp": {
        "noise_var": REQUIRED,
        "kernel": [{"type": "Matern52", "amplitude": 1.0, "length_scale": 1.0},
                   {"type": "White", "noise_level": 1e-5}],
        "length_scales": None,
    },
    "ensemble": {**NET_DEFAULTS, "n_members": 5, "gamma": 0.0},
    "ensemble-boot": {**NET_DEFAULTS, "n_members": 5, "gamma": 0.0},
    "ensemble-anchored": {
        **NET_DEFAULTS, "n_members": 5, "init_var": 1.0, "prior_var": 1.0, "noise_var": 0.1,
    },
    "mcd": {**NET_DEFAULTS, "noise_var": REQUIRED, "rate": 0.1, "n_passes": 50, "gamma": 0.0},
    "sngp": {
        **NET_DEFAULTS, "noise_var": REQUIRED, "prior_var": 1.0, "norm_bound": 1.0,
        "power_iters": 10, "n_rff": 200, "length_scale": 1.0,
    },
    "bnn-hmc": {
        "hidden": [20], "activation": "relu", "noise_var": REQUIRED, "prior_sd": 1.0,
        "step_size": 1e-3, "n_leapfrog": 20, "n_iter": 1000, "burn_in": 500, "thin": 5,
        "mass": 1.0,
    },
}
KINDS = tuple(SCHEMAS)


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(unknown)} in {where}")
    out = {}
    for key, default in defaults.items():
        if isinstance(default, dict):
            sub = given.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = _merge(default, sub, f"{where}.{key}")
        elif key in given:
            out[key] = given[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing required config key {where}.{key} "
                              f"(set it with --set {key}=...)")
        else:
            out[key] = copy.deepcopy(default)
    return out


def resolve_config(kind: str, given: dict | None) -> dict:
    """Fill defaults, reject unknown keys and check value types."""
    if kind not in SCHEMAS:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {', '.join(KINDS)}")
    cfg = _merge(SCHEMAS[kind], dict(given or {}), kind)
    try:
        _build(kind, cfg, dim=1)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {kind} config: {exc}") from None
    return cfg


def _positive(cfg, key):
    v = cfg[key]
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
        raise ConfigError(f"{key} must be a positive number, got {v!r}")
    return float(v)


def _spec(cfg, dim) -> MlpSpec:
    return MlpSpec(dim, tuple(cfg["hidden"]), cfg["activation"])


def _opt(cfg) -> OptimizerConfig:
    return OptimizerConfig(**cfg["optimizer"])


def _build(kind, cfg, dim):
    """Validate numbers by constructing the typed configs (dim is a placeholder)."""
    if "noise_var" in cfg:
        _positive(cfg, "noise_var")
    if kind in ("gp",):
        KernelSpec.from_dict(cfg["kernel"])
        return None
    if kind == "bnn-hmc":
        return hmc.HmcConfig(cfg["step_size"], cfg["n_leapfrog"], cfg["n_iter"], cfg["burn_in"],
                             cfg["thin"], cfg["mass"], cfg["prior_sd"], 1.0), _spec(cfg, dim)
    spec, opt = _spec(cfg, dim), _opt(cfg)
    if kind.startswith("nlm"):
        mode = kind.split("-")[1]
        return nlm.NlmConfig(spec, cfg["prior_var"], cfg["noise_var"], cfg.get("gamma", 0.0), opt, mode)
    if kind == "luna":
        sched = una.AnnealSchedule(cfg["schedule"]["kind"], cfg["schedule"]["scale"],
                                   max(opt.epochs, 1))
        return una.LunaConfig(spec, cfg["n_heads"], cfg["gamma"], cfg["prior_var"], cfg["noise_var"],
                              cfg["sigma_perturb"], sched, opt, cfg["pooling"])
    if kind == "tuna":
        if cfg["prior_var"] is not None:
            _positive(cfg, "prior_var")
        for key in ("ref_length_scale", "ref_amplitude", "n_functions"):
            _positive(cfg, key)
        if cfg["sigma_x"] < 0:
            raise ConfigError("sigma_x must be non-negative")
        return spec, opt
    if kind.startswith("ensemble"):
        variant = {"ensemble": "vanilla", "ensemble-boot": "bootstrap",
                   "ensemble-anchored": "anchored"}[kind]
        extra = {k: cfg[k] for k in ("init_var", "prior_var", "noise_var") if k in cfg}
        return ensembles.EnsembleConfig(spec, cfg["n_members"], variant, cfg.get("gamma", 0.0),
                                        optimizer=opt, **extra)
    if kind == "mcd":
        return mcd.McdConfig(spec, cfg["rate"], cfg["n_passes"], cfg["gamma"], cfg["noise_var"], opt)
    if kind == "sngp":
        return sngp.SngpConfig(spec, cfg["norm_bound"], cfg["power_iters"], cfg["n_rff"],
                               cfg["length_scale"], cfg["prior_var"], cfg["noise_var"], opt)
    raise ConfigError(f"unknown model kind {kind!r}")


# -- fitted models -------------------------------------------------------------------


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def _params_to_json(p: MlpParams) -> dict:
    return {"weights": [_arr(w) for w in p.weights], "biases": [_arr(b) for b in p.biases]}


def _params_from_json(spec: MlpSpec, d: dict) -> MlpParams:
    return MlpParams(spec, [np.array(w, dtype=float).reshape(o, i) for w, (o, i) in
                            zip(d["weights"], _shapes(spec))],
                     [np.array(b, dtype=float) for b in d["biases"]])


def _shapes(spec):
    sizes = spec.layer_sizes
    return list(zip(sizes[1:], sizes[:-1]))


def _post_to_json(post: BlrPosterior) -> dict:
    return {"mean": _arr(post.mean), "cov": _arr(post.cov), "prior_var": post.prior_var,
            "noise_var": post.noise_var, "prec_chol": _arr(post.prec_chol)}


def _post_from_json(d: dict) -> BlrPosterior:
    return BlrPosterior(np.array(d["mean"]), np.array(d["cov"]), d["prior_var"], d["noise_var"],
                        np.array(d["prec_chol"]))


@dataclass
class FittedModel:
    kind: str
    config: dict
    stats: NormStats
    state: dict  # kind-specific, JSON-friendly
    seed: int

    @property
    def dim(self) -> int:
        return len(self.stats.x_mean)

    def predict_normalized(self, Xn) -> PredictiveDist:
        return _PREDICT[self.kind](self, np.asarray(Xn, dtype=float))

    def predict(self, X) -> PredictiveDist:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.dim:
            raise ValueError(f"model expects {self.dim} input columns, got {X.shape[1]}")
        return denormalize_dist(self.predict_normalized(self.stats.transform_x(X)), self.stats)

    def to_json(self) -> str:
        doc = {"format": MODEL_FORMAT, "kind": self.kind, "seed": self.seed,
               "config": self.config, "stats": self.stats.to_dict(), "state": self.state}
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FittedModel":
        doc = json.loads(text)
        if doc.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"unsupported model format {doc.get('format')!r}; "
                                   f"expected {MODEL_FORMAT}")
        return cls(doc["kind"], doc["config"], NormStats.from_dict(doc["stats"]), doc["state"],
                   doc["seed"])


def _noise_norm(cfg, stats):
    return float(cfg["noise_var"]) / stats.y_std**2


def fit_model(kind: str, config: dict | None, dataset: Dataset, seed: int,
              jobs: int = 1) -> FittedModel:
    """Normalise ``dataset``, train the model and return it ready to predict."""
    cfg = resolve_config(kind, config)
    data, stats = normalize(dataset)
    stream = RngStream(seed)
    state = _FIT[kind](cfg, data, stats, stream, jobs)
    return FittedModel(kind, cfg, stats, state, int(seed))


# per-kind fit / predict ---------------------------------------------------------------


def _fit_nlm(cfg, data, stats, stream, jobs):
    nv = _noise_norm(cfg, stats)
    mode = cfg_kind_mode(cfg)
    conf = nlm.NlmConfig(_spec(cfg, data.dim), cfg["prior_var"], nv, cfg.get("gamma", 0.0),
                         _opt(cfg), mode)
    params, _ = nlm.train_nlm(data, conf, stream)
    post = nlm.nlm_posterior(params, data, cfg["prior_var"], nv)
    return {"params": _params_to_json(params), "posterior": _post_to_json(post)}


def cfg_kind_mode(cfg):
    return cfg["_mode"]


def _predict_features(model: FittedModel, Xn):
    spec = _spec(model.config, model.dim)
    params = _params_from_json(spec, model.state["params"])
    return predict_blr(_post_from_json(model.state["posterior"]), features(params, Xn))


def _fit_luna(cfg, data, stats, stream, jobs):
    nv = _noise_norm(cfg, stats)
    opt = _opt(cfg)
    sched = una.AnnealSchedule(cfg["schedule"]["kind"], cfg["schedule"]["scale"], max(opt.epochs, 1))
    conf = una.LunaConfig(_spec(cfg, data.dim), cfg["n_heads"], cfg["gamma"], cfg["prior_var"], nv,
                          cfg["sigma_perturb"], sched, opt, cfg["pooling"])
    params, _, _ = una.train_luna(data, conf, stream)
    post = una.luna_posterior(params, data, cfg["prior_var"], nv)
    return {"params": _params_to_json(params), "posterior": _post_to_json(post)}


def _fit_tuna(cfg, data, stats, stream, jobs):
    nv = _noise_norm(cfg, stats)
    spec = _spec(cfg, data.dim)
    Xr = una.make_reference_points(data.X, cfg["sigma_x"], stream.split(10))
    kern = KernelSpec.of(RBF(cfg["ref_amplitude"], cfg["ref_length_scale"]))
    refset = una.build_reference_set(Xr, una.GpPrior(kern), int(cfg["n_functions"]), stream.split(11))
    params, heads, _ = una.train_tuna(refset, spec, _opt(cfg), stream, cfg["gamma"])
    alpha = cfg["prior_var"]
    if alpha is None:
        alpha = una.fit_prior_variance(features(params, refset.X), refset.G, nv)
    post = una.tuna_posterior(params, data, alpha, nv)
    return {"params": _params_to_json(params), "posterior": _post_to_json(post), "prior_var": alpha}


def _fit_gp(cfg, data, stats, stream, jobs):
    nv = _noise_norm(cfg, stats)
    spec = KernelSpec.from_dict(cfg["kernel"])
    if cfg["length_scales"]:
        cands = []
        for ls in cfg["length_scales"]:
            terms = [Matern52(t.amplitude, float(ls)) if isinstance(t, Matern52) else
                     RBF(t.amplitude, float(ls)) if isinstance(t, RBF) else t for t in spec.terms]
            cands.append(KernelSpec(tuple(terms)))
        spec = gp_grid_search(data.X, data.y, cands, nv)
    return {"kernel": spec.to_dict(), "X": _arr(data.X), "y": _arr(data.y), "noise_var": nv}


def _predict_gp(model, Xn):
    s = model.state
    post = gp_fit(np.array(s["X"]), np.array(s["y"]), KernelSpec.from_dict(s["kernel"]),
                  s["noise_var"])
    return gp_predict(post, Xn)


def _fit_ensemble(cfg, data, stats, stream, jobs):
    conf = _build(cfg["_kind"], cfg, data.dim)
    model = ensembles.train_ensemble(data, conf, stream, jobs=jobs)
    return {"members": [_params_to_json(m) for m in model.members]}


def _predict_ensemble(model, Xn):
    spec = _spec(model.config, model.dim)
    members = [_params_from_json(spec, m) for m in model.state["members"]]
    return ensembles.ensemble_predict(members, Xn)


def _fit_mcd(cfg, data, stats, stream, jobs):
    conf = _build("mcd", cfg, data.dim)
    conf = mcd.McdConfig(conf.spec, conf.rate, conf.n_passes, conf.gamma, _noise_norm(cfg, stats),
                         conf.optimizer)
    m = mcd.mcd_train(data, conf, stream)
    return {"params": _params_to_json(m.params), "noise_var": conf.noise_var}


def _predict_mcd(model, Xn):
    cfg = model.config
    spec = _spec(cfg, model.dim)
    conf = mcd.McdConfig(spec, cfg["rate"], cfg["n_passes"], cfg["gamma"], model.state["noise_var"])
    m = mcd.McdModel(_params_from_json(spec, model.state["params"]), conf)
    return mcd.mcd_predict(m, Xn, RngStream(model.seed).split(99))


def _fit_sngp(cfg, data, stats, stream, jobs):
    base = _build("sngp", cfg, data.dim)
    conf = sngp.SngpConfig(base.spec, base.norm_bound, base.power_iters, base.n_rff,
                           base.length_scale, base.prior_var, _noise_norm(cfg, stats),
                           base.optimizer)
    m = sngp.train_sngp(data, conf, stream)
    return {"params": _params_to_json(m.params), "rff_W": _arr(m.rff_W), "rff_b": _arr(m.rff_b),
            "length_scale": m.length_scale, "posterior": _post_to_json(m.posterior)}


def _predict_sngp(model, Xn):
    s = model.state
    spec = _spec(model.config, model.dim)
    m = sngp.SngpModel(_params_from_json(spec, s["params"]), np.array(s["rff_W"]),
                       np.array(s["rff_b"]), s["length_scale"], _post_from_json(s["posterior"]))
    return sngp.sngp_predict(m, Xn)


def _fit_hmc(cfg, data, stats, stream, jobs):
    conf, spec = _build("bnn-hmc", cfg, data.dim)
    conf = hmc.HmcConfig(conf.step_size, conf.n_leapfrog, conf.n_iter, conf.burn_in, conf.thin,
                         conf.mass, conf.prior_sd, float(np.sqrt(_noise_norm(cfg, stats))))
    potential = hmc.bnn_potential(spec, data.X, data.y, conf.prior_sd, conf.noise_sd)
    from .net import mlp_init
    q0 = mlp_init(spec, stream.split(0)).flatten()
    res = hmc.hmc_sample(potential, conf, q0, stream.split(1))
    samples = res.samples(conf.burn_in, conf.thin)
    return {"samples": _arr(samples), "noise_sd": conf.noise_sd,
            "accept_rate": res.accept_rate}


def _predict_hmc(model, Xn):
    from .net import forward, mlp_init
    spec = _spec(model.config, model.dim)
    template = mlp_init(spec, RngStream(0))
    preds = np.stack([forward(template.unflatten(np.array(q)), Xn)[0]
                      for q in model.state["samples"]])
    var = preds.var(axis=0)
    return PredictiveDist(preds.mean(axis=0), var + model.state["noise_sd"] ** 2, var)


def _with_tag(fn, key, value):
    def wrapped(cfg, *args):
        return fn({**cfg, key: value}, *args)
    return wrapped


_FIT: dict[str, Callable] = {
    "nlm-map": _with_tag(_fit_nlm, "_mode", "map"),
    "nlm-mle": _with_tag(_fit_nlm, "_mode", "mle"),
    "nlm-marginal": _with_tag(_fit_nlm, "_mode", "marginal"),
    "luna": _fit_luna,
    "tuna": _fit_tuna,
    "gp": _fit_gp,
    "ensemble": _with_tag(_fit_ensemble, "_kind", "ensemble"),
    "ensemble-boot": _with_tag(_fit_ensemble, "_kind", "ensemble-boot"),
    "ensemble-anchored": _with_tag(_fit_ensemble, "_kind", "ensemble-anchored"),
    "mcd": _fit_mcd,
    "sngp": _fit_sngp,
    "bnn-hmc": _fit_hmc,
}
_PREDICT: dict[str, Callable] = {
    "nlm-map": _predict_features,
    "nlm-mle": _predict_features,
    "nlm-marginal": _predict_features,
    "luna": _predict_features,
    "tuna": _predict_features,
    "gp": _predict_gp,
    "ensemble": _predict_ensemble,
    "ensemble-boot": _predict_ensemble,
    "ensemble-anchored": _predict_ensemble,
    "mcd": _predict_mcd,
    "sngp": _predict_sngp,
    "bnn-hmc": _predict_hmc,
}
