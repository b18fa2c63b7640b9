"""JSON run configuration, data loading and model files."""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, fields
from typing import Any

import numpy as np

from .data import (ConfigError, ProcessedSeries, SyntheticSpec, generate_synthetic, load_csv,
                   load_processed_csv, process_raw, split)
from .env import EnvConfig
from .experiment import METHODS, Dataset, HyperparamSpace, MethodSpec
from .nn import ParamSet
from .rl import ActorCritic, AlgoConfig, TrainedModel, profile

MODEL_FORMAT_VERSION = 1

_ALGO_FIELDS = tuple(f.name for f in fields(AlgoConfig))
# leaf keys; anything nested below these is a value, not a namespace
_LEAVES = {
    "seed", "out", "method", "search",
    "data.csv", "data.processed_csv", "data.kinds", "data.universe", "data.synthetic",
    "split.ratios",
    "env.universe", "env.state_lag", "env.gross_limit", "env.linear_reward",
    "algo.profile", *(f"algo.{k}" for k in _ALGO_FIELDS),
    "net.hidden", "net.activation",
    "opt.kind", "opt.lr", "opt.max_grad_clip", "opt.rmsprop_eps",
    "smoothing.method", "smoothing.w_l", "smoothing.decimals", "smoothing.S", "smoothing.S_space",
    "smoothing.mode",
    "il.mode", "il.opd_coef", "il.lgn_sigma", "il.sigma_space", "il.oracle", "il.oracle_steps",
    "exp.methods", "exp.seeds", "exp.total_steps", "exp.tune_steps", "exp.tune_samples", "exp.workers",
}
# config keys that are aliases for algorithm settings
_ALIASES = {"net.hidden": "hidden", "net.activation": "activation", "opt.kind": "optimizer",
            "opt.lr": "lr", "opt.max_grad_clip": "max_grad_clip", "opt.rmsprop_eps": "rmsprop_eps"}
_DEFAULTS = {
    "seed": 0, "out": "out", "split.ratios": [0.6, 0.2, 0.2],
    "smoothing.w_l": 5, "smoothing.decimals": 2, "smoothing.S": 8, "smoothing.mode": "staged",
    "il.opd_coef": 0.5, "il.oracle": "analytic", "il.oracle_steps": 5_000_000,
    "exp.seeds": 50, "exp.total_steps": 1_000_000, "exp.tune_steps": 100_000, "exp.tune_samples": 150,
    "exp.workers": 1,
}


def flatten(cfg: dict, prefix: str = "") -> dict:
    """Nested or dotted keys to one flat dotted mapping."""
    out = {}
    for k, v in cfg.items():
        key = f"{prefix}{k}"
        if key in _LEAVES or not isinstance(v, dict):
            if key in out:
                raise ConfigError(f"key {key!r} given twice")
            out[key] = v
        else:
            for kk, vv in flatten(v, key + ".").items():
                if kk in out:
                    raise ConfigError(f"key {kk!r} given twice")
                out[kk] = vv
    return out


@dataclass(frozen=True)
class RunConfig:
    """Validated flat configuration; ``values`` holds every key with defaults filled."""
    values: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        flat = flatten(raw)
        unknown = sorted(set(flat) - _LEAVES)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        vals = {**_DEFAULTS, **flat}
        cfg = cls(_canonical(vals))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def __getitem__(self, key: str):
        return self.values[key]

    def updated(self, updates: dict) -> "RunConfig":
        """Copy with flat keys replaced; a value of None removes the key."""
        vals = dict(self.values)
        for k, v in updates.items():
            if v is None:
                vals.pop(k, None)
            else:
                vals[k] = v
        return RunConfig.from_dict(vals)

    def to_json(self) -> str:
        return json.dumps(self.values, indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.values, sort_keys=True).encode()).hexdigest()

    # ------------------------------------------------------------------

    @property
    def methods(self) -> list[str]:
        if "exp.methods" in self.values:
            return list(self.values["exp.methods"])
        if "method" in self.values:
            return [self.values["method"]]
        inferred = []
        sm = self.values.get("smoothing.method")
        if sm not in (None, "none"):
            inferred.append(sm)
        if "il.mode" in self.values:
            inferred.append(self.values["il.mode"])
        return inferred

    def validate(self) -> None:
        v = self.values
        missing = []
        src = [k for k in ("data.csv", "data.processed_csv", "data.synthetic") if k in v]
        if not src:
            missing.append("data.csv | data.processed_csv | data.synthetic")
        if len(src) > 1:
            raise ConfigError(f"give exactly one data source, got {src}")
        if src and src[0] != "data.synthetic":
            if "data.kinds" not in v:
                missing.append("data.kinds")
            if "data.universe" not in v and "env.universe" not in v:
                missing.append("data.universe")
        if "algo.profile" not in v and "algo.algorithm" not in v:
            missing.append("algo.profile")
        if "algo.profile" in v and "algo.algorithm" not in v:
            missing.append("algo.algorithm")
        if "algo.profile" not in v:
            for k in ("lr", "steps_per_update", "gamma", "gae_lambda"):
                if f"algo.{k}" not in v and not any(v.get(a) is not None and t == k
                                                     for a, t in _ALIASES.items()):
                    missing.append(f"algo.{k}")
            if "env.state_lag" not in v:
                missing.append("env.state_lag")
            if "env.gross_limit" not in v:
                missing.append("env.gross_limit")
        methods = self.methods
        if not methods:
            missing.append("exp.methods")
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if "dpd-lgn" in methods and "il.lgn_sigma" not in v and "il.sigma_space" not in v:
            missing.append("il.lgn_sigma | il.sigma_space")
        if missing:
            raise ConfigError("missing config keys: " + ", ".join(missing))
        if v.get("smoothing.mode") not in ("staged", "positional"):
            raise ConfigError("smoothing.mode must be 'staged' or 'positional'")
        if v.get("il.oracle") not in ("analytic", "rl"):
            raise ConfigError("il.oracle must be 'analytic' or 'rl'")
        if int(v["exp.seeds"]) < 2:
            raise ConfigError("exp.seeds must be >= 2")
        if "search" in v:
            self.space()
        # build the algorithm settings now so bad values fail at load time
        self.algo()

    # ------------------------------------------------------------------

    def algo(self) -> tuple[AlgoConfig, dict]:
        v = self.values
        if "algo.profile" in v:
            cfg, env_kw = profile(v["algo.profile"], v["algo.algorithm"])
        else:
            cfg, env_kw = AlgoConfig(algorithm=v["algo.algorithm"]), {}
        over = {k[5:]: v[k] for k in v if k.startswith("algo.") and k[5:] in _ALGO_FIELDS}
        over.pop("algorithm", None)
        for alias, target in _ALIASES.items():
            if alias in v:
                over[target] = v[alias]
        if "hidden" in over:
            over["hidden"] = tuple(over["hidden"])
        cfg = cfg.replace(**over)
        for k in ("state_lag", "gross_limit"):
            if f"env.{k}" in v:
                env_kw[k] = v[f"env.{k}"]
        return cfg, env_kw

    def space(self) -> HyperparamSpace | None:
        grids = self.values.get("search")
        if not grids:
            return None
        unknown = set(grids) - set(_ALGO_FIELDS) - {"state_lag", "gross_limit"}
        if unknown:
            raise ConfigError(f"search over unknown settings {sorted(unknown)}")
        return HyperparamSpace({k: list(g) for k, g in grids.items()})

    def dataset(self) -> tuple[Dataset, EnvConfig]:
        series = self.series()
        algo_cfg, env_kw = self.algo()
        kw = dict(env_kw)
        if "env.universe" in self.values:
            kw["universe"] = tuple(self.values["env.universe"])
        if "env.linear_reward" in self.values:
            kw["linear_reward"] = bool(self.values["env.linear_reward"])
        env = EnvConfig.for_series(series, **kw)
        return Dataset(series, split(series, self.values["split.ratios"], min_length=env.warmup + 2)), env

    def series(self) -> ProcessedSeries:
        v = self.values
        if "data.synthetic" in v:
            return self.synthetic()[0]
        universe = v.get("data.universe", v.get("env.universe"))
        if "data.processed_csv" in v:
            return load_processed_csv(v["data.processed_csv"], v["data.kinds"], universe)
        return process_raw(load_csv(v["data.csv"], v["data.kinds"]), universe)

    def synthetic(self):
        spec_kw = dict(self.values["data.synthetic"])
        unknown = set(spec_kw) - {f.name for f in fields(SyntheticSpec)}
        if unknown:
            raise ConfigError(f"unknown synthetic settings {sorted(unknown)}")
        return generate_synthetic(SyntheticSpec(**spec_kw))

    def method_spec(self, method: str, env: EnvConfig) -> MethodSpec:
        v = self.values
        algo_cfg, _ = self.algo()
        sigma = v.get("il.lgn_sigma")
        if isinstance(sigma, list):
            sigma = tuple(sigma)
        return MethodSpec(
            method=method, algo=algo_cfg, env=env, w_l=int(v["smoothing.w_l"]),
            decimals=int(v["smoothing.decimals"]), S=int(v["smoothing.S"]),
            S_space=tuple(v.get("smoothing.S_space", ())), curriculum_mode=v["smoothing.mode"],
            opd_coef=float(v["il.opd_coef"]), lgn_sigma=sigma, oracle=v["il.oracle"],
            oracle_steps=int(v["il.oracle_steps"]))


def _canonical(x: Any):
    """JSON-normal form: tuples to lists, numpy scalars to Python."""
    if isinstance(x, dict):
        return {str(k): _canonical(val) for k, val in x.items()}
    if isinstance(x, (list, tuple)):
        return [_canonical(i) for i in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


# --------------------------------------------------------------------------
# model files


class ModelFormatError(ValueError):
    pass


def _encode(params: ParamSet) -> dict:
    return {"shapes": [list(a.shape) for a in params],
            "data": base64.b64encode(params.flatten().astype("<f8").tobytes()).decode("ascii")}


def _decode(d: dict) -> ParamSet:
    flat = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8")
    arrays, i = [], 0
    for shape in d["shapes"]:
        n = int(np.prod(shape))
        arrays.append(flat[i:i + n].reshape(shape).copy())
        i += n
    if i != flat.size:
        raise ModelFormatError("parameter payload does not match the declared shapes")
    return ParamSet(arrays)


def model_to_dict(trained: TrainedModel, env: EnvConfig | None = None) -> dict:
    out = {"format_version": MODEL_FORMAT_VERSION, "algo": trained.cfg.to_dict(), "seed": int(trained.seed),
           "steps_trained": int(trained.steps_trained), "activation": trained.model.activation,
           "policy": _encode(trained.policy), "value": _encode(trained.value)}
    if env is not None:
        out["env"] = {"universe": list(env.universe), "state_lag": env.state_lag,
                      "gross_limit": env.gross_limit}
    return out


def model_from_dict(d: dict) -> TrainedModel:
    version = d.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"model format version {version!r}, this build reads {MODEL_FORMAT_VERSION}")
    algo = d["algo"]
    cfg = AlgoConfig.from_dict({**algo, "hidden": tuple(algo["hidden"])})
    model = ActorCritic(_decode(d["policy"]), _decode(d["value"]), d["activation"])
    return TrainedModel(model, cfg, d["seed"], d["steps_trained"])


def save_model(trained: TrainedModel, path, env: EnvConfig | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(trained, env), fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> TrainedModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
