"""Command-line entry point: process, synth, tune, train, evaluate, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import experiment as ex
from .config import RunConfig, save_model
from .data import ConfigError, DataError, load_csv, process_raw

log = logging.getLogger("curriculum_control")


def _out_dir(cfg: RunConfig, args) -> str:
    out = args.out or cfg["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_manifest(out: str, cfg: RunConfig, command: str, artifacts) -> str:
    path = os.path.join(out, "manifest.json")
    _write_json(path, {"command": command, "config_hash": cfg.hash(), "seed": cfg["seed"],
                       "version": __version__, "artifacts": sorted(os.path.relpath(a, out) for a in artifacts)})
    return path


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.workers is not None:
        updates["exp.workers"] = args.workers
    return cfg.updated(updates) if updates else cfg


# --------------------------------------------------------------------------
# commands


def cmd_process(cfg: RunConfig, out: str) -> list[str]:
    v = cfg.values
    if "data.csv" not in v:
        raise ConfigError("process needs data.csv")
    series = process_raw(load_csv(v["data.csv"], v["data.kinds"]), v.get("data.universe", v.get("env.universe")))
    path = os.path.join(out, "processed.csv")
    series.to_csv(path)
    return [path]


def cmd_synth(cfg: RunConfig, out: str) -> list[str]:
    if "data.synthetic" not in cfg.values:
        raise ConfigError("synth needs data.synthetic")
    series, truth = cfg.synthetic()
    p1 = os.path.join(out, "series.csv")
    series.to_csv(p1)
    p2 = os.path.join(out, "ground_truth.csv")
    n = truth.signal.shape[1]
    header = ",".join(["date"] + [f"signal_{i}" for i in range(n)] + [f"noise_{i}" for i in range(n)])
    with open(p2, "w") as fh:
        fh.write(header + "\n")
        for d, s, e in zip(series.dates, truth.signal, truth.noise):
            fh.write(",".join([str(d)] + [repr(float(x)) for x in np.concatenate([s, e])]) + "\n")
    return [p1, p2]


def cmd_tune(cfg: RunConfig, out: str) -> list[str]:
    """Tune on train/validation and emit a config that ``evaluate`` consumes as is."""
    data, env = cfg.dataset()
    v = cfg.values
    seed, steps, workers = int(v["seed"]), int(v["exp.tune_steps"]), int(v["exp.workers"])
    base = cfg.method_spec("baseline", env)
    updates, trace = {}, {}
    space = cfg.space()
    if space is not None:
        best, samples = ex.random_grid_search(space, int(v["exp.tune_samples"]), steps, base, data, seed, workers)
        for k, val in best.items():
            updates[f"env.{k}" if k in ("state_lag", "gross_limit") else f"algo.{k}"] = val
        updates["search"] = None
        trace["search"] = [{"params": p, "score": s} for p, s in samples]
        base = ex.apply_params(base, best)
    methods = cfg.methods
    if "tis" in methods and len(v.get("smoothing.S_space", ())) > 1:
        S, samples = ex.tune_tis(v["smoothing.S_space"], base, data, steps, seed, workers)
        updates["smoothing.S_space"] = [S]
        trace["tis"] = [{"S": s, "score": sc} for s, sc in samples]
    if "dpd-lgn" in methods and "il.sigma_space" in v:
        sigma, samples = ex.tune_sigma(v["il.sigma_space"], base, data, steps, seed, workers=workers)
        updates["il.lgn_sigma"] = sigma
        updates["il.sigma_space"] = None
        trace["sigma"] = [{"sigma": s, "score": sc} for s, sc in samples]
    tuned = cfg.updated(updates)
    p1 = os.path.join(out, "tuned_config.json")
    tuned.save(p1)
    p2 = os.path.join(out, "tuning_trace.json")
    _write_json(p2, _jsonable(trace))
    return [p1, p2]


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(val) for k, val in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(i) for i in x]
    if isinstance(x, float) and not np.isfinite(x):
        return None
    if isinstance(x, np.generic):
        return x.item()
    return x


def _final_spec(cfg: RunConfig, method: str, env, data, workers: int) -> ex.MethodSpec:
    spec = cfg.method_spec(method, env)
    v = cfg.values
    if method == "tis":
        S_space = v.get("smoothing.S_space") or [v["smoothing.S"]]
        S, _ = ex.tune_tis(S_space, spec, data, int(v["exp.tune_steps"]), int(v["seed"]), workers)
        spec = spec.replace(S=S)
    if method == "dpd-lgn" and spec.lgn_sigma is None:
        raise ConfigError("dpd-lgn needs il.lgn_sigma; run `tune` first")
    return spec


def cmd_train(cfg: RunConfig, out: str) -> list[str]:
    data, env = cfg.dataset()
    v = cfg.values
    written = []
    os.makedirs(os.path.join(out, "models"), exist_ok=True)
    for m in cfg.methods:
        if m == "rp":
            continue
        spec = _final_spec(cfg, m, env, data, int(v["exp.workers"]))
        trained = ex.train_method(spec, data, int(v["exp.total_steps"]), int(v["seed"]), final=True)
        path = os.path.join(out, "models", f"{ex._safe(spec.label)}.json")
        save_model(trained, path, spec.env)
        written.append(path)
    return written


def run_evaluation(cfg: RunConfig) -> tuple[list, dict]:
    data, env = cfg.dataset()
    v = cfg.values
    workers = int(v["exp.workers"])
    reports, base_label = [], None
    for m in cfg.methods:
        spec = _final_spec(cfg, m, env, data, workers)
        if m == "baseline":
            base_label = spec.label
        log.info("evaluating %s", spec.label)
        reports.append(ex.run_replicas(spec, int(v["exp.seeds"]), data, int(v["exp.total_steps"]),
                                       int(v["seed"]), workers))
    tests = ex.compare_to_baseline(reports, base_label) if base_label else {}
    return reports, tests


def cmd_evaluate(cfg: RunConfig, out: str) -> list[str]:
    reports, tests = run_evaluation(cfg)
    return ex.emit_report(reports, tests, out)


def format_table(reports, tests) -> str:
    lines = [f"{'method':<16}{'mean %':>12}{'std':>12}{'n':>5}{'t':>9}{'p %':>10}"]
    for r in reports:
        t = tests.get(r.method)
        ts = f"{t.t_stat:9.3f}{t.p_value:10.3f}" if t else f"{'':>9}{'':>10}"
        lines.append(f"{r.method:<16}{r.mean:12.3f}{r.std:12.3f}{r.n:5d}{ts}")
    return "\n".join(lines)


def cmd_report(directory: str) -> list[str]:
    reports, tests = ex.load_report(directory)
    written = ex.emit_report(reports, tests, directory)
    print(format_table(reports, tests))
    return written


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curriculum-control", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("process", "synth", "tune", "train", "evaluate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--workers", type=int, help="parallel runs (overrides the config)")
        sp.add_argument("-v", "--verbose", action="store_true")
    sp = sub.add_parser("report")
    sp.add_argument("dir", help="directory holding results.json")
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


_COMMANDS = {"process": cmd_process, "synth": cmd_synth, "tune": cmd_tune, "train": cmd_train,
             "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.dir)
            return 0
        cfg = load_config(args)
        out = _out_dir(cfg, args)
        written = _COMMANDS[args.command](cfg, out)
        written.append(write_manifest(out, cfg, args.command, written))
    except (ConfigError, DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
