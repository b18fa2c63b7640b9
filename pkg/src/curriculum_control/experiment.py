"""Method runners, tuning, seed replicas, statistics and report files."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import imitation
from .data import ConfigError, DataSplit, ProcessedSeries, concat
from .env import EnvConfig, portfolio_log_return
from .rl import AlgoConfig, TrainedModel, TrainingEnv, greedy_episode, train
from .smoothing import CurriculumSchedule, ema_series, inverse_smooth_positional, round_returns

log = logging.getLogger(__name__)

METHODS = ("baseline", "rp", "dpd", "dpd-lgn", "opd", "round", "ema", "is", "tis")
STATE_LAGS = tuple(range(5, 61, 5))


# --------------------------------------------------------------------------
# method description


@dataclass(frozen=True)
class MethodSpec:
    """Everything needed to train and test one method on one data set."""
    method: str
    algo: AlgoConfig
    env: EnvConfig
    w_l: int = 5
    decimals: int = 2
    S: int = 8
    S_space: tuple = ()
    curriculum_mode: str = "staged"
    opd_coef: float = 0.5
    lgn_sigma: Optional[object] = None
    oracle: str = "analytic"
    oracle_steps: int = 5_000_000
    name: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.oracle not in ("analytic", "rl"):
            raise ConfigError(f"unknown oracle {self.oracle!r}")
        if self.method == "dpd-lgn" and self.lgn_sigma is None:
            raise ConfigError("dpd-lgn needs lgn_sigma")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        algo = self.algo.algorithm.upper()
        suffix = {"baseline": "", "rp": "", "dpd": "-DPD", "dpd-lgn": "-DPD-LGN", "opd": "-OPD",
                  "round": "-R", "ema": f"-EMA{self.w_l}", "is": f"-IS{self.S}", "tis": "-TIS"}
        if self.method == "rp":
            return "RP"
        return algo + suffix[self.method]

    def replace(self, **kw) -> "MethodSpec":
        return replace(self, **kw)


@dataclass(frozen=True)
class Dataset:
    series: ProcessedSeries
    split: DataSplit

    def part(self, name: str) -> ProcessedSeries:
        r = getattr(self.split, name)
        return self.series.slice(r.start, r.stop)

    def fit_parts(self, final: bool) -> list[ProcessedSeries]:
        return [self.part("train"), self.part("validation")] if final else [self.part("train")]


def _fit_series(parts: Sequence[ProcessedSeries]) -> ProcessedSeries:
    out = parts[0]
    for p in parts[1:]:
        out = concat(out, p)
    return out


def _oracle_labels(spec: MethodSpec, fit: ProcessedSeries, seed: int) -> imitation.OracleTrajectory:
    rng = range(0, len(fit))
    if spec.oracle == "rl":
        return imitation.rl_oracle(fit, rng, spec.env, spec.algo, spec.oracle_steps, seed)
    return imitation.analytic_oracle(fit, rng, spec.env.gross_limit)


def make_env_factory(spec: MethodSpec, data: Dataset, final: bool, seed: int = 0, S: int | None = None):
    """(env_factory, curriculum) for training ``spec`` on train (+ validation if ``final``)."""
    parts = data.fit_parts(final)
    env_cfg = spec.env
    m = spec.method
    curriculum = None
    oracle = None
    if m in ("round", "ema"):
        # each part is smoothed on its own before concatenation
        if m == "ema":
            parts = [ema_series(p, spec.w_l) for p in parts]
        else:
            parts = [p.with_values(round_returns(p.values, spec.decimals)) for p in parts]
    fit = _fit_series(parts)
    if m in ("dpd", "dpd-lgn", "opd"):
        traj = _oracle_labels(spec, fit, seed)
        if m == "dpd-lgn":
            noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x16A]))
            traj = imitation.lgn_perturb(traj, spec.lgn_sigma, noise_rng)
        oracle = traj.actions
        env_cfg = env_cfg.replace(reward_hook="opd" if m == "opd" else "dpd", opd_coef=spec.opd_coef)
    rng = range(0, len(fit))
    if m in ("is", "tis"):
        S = S if S is not None else spec.S
        curriculum = CurriculumSchedule(S, spec.curriculum_mode)
        if spec.curriculum_mode == "positional":
            fit = inverse_smooth_positional(fit, S)

            def factory(_w_l):
                return TrainingEnv(fit, rng, env_cfg)
        else:
            def factory(w_l):
                return TrainingEnv(fit if w_l in (None, 1) else ema_series(fit, w_l), rng, env_cfg)
        return factory, curriculum

    def factory(_w_l):
        return TrainingEnv(fit, rng, env_cfg, oracle)
    return factory, curriculum


def train_method(spec: MethodSpec, data: Dataset, total_steps: int, seed: int, final: bool = True,
                 S: int | None = None) -> TrainedModel:
    if spec.method == "rp":
        raise ConfigError("the rebalanced portfolio is not trained")
    factory, curriculum = make_env_factory(spec, data, final, seed, S)
    return train(factory, spec.algo, total_steps, seed, curriculum)


# --------------------------------------------------------------------------
# evaluation


def cumulative_return(rewards) -> float:
    """Percent return from a sequence of per-step log-returns."""
    return 100.0 * math.expm1(math.fsum(np.asarray(rewards, dtype=float)))


def return_path(rewards) -> np.ndarray:
    """Cumulative percent return after each step."""
    return 100.0 * np.expm1(np.cumsum(np.asarray(rewards, dtype=float)))


def evaluate(model, series: ProcessedSeries, rng: range, env_cfg: EnvConfig) -> np.ndarray:
    rewards, _ = greedy_episode(model, series, rng, env_cfg)
    return rewards


def rp_baseline(series: ProcessedSeries, rng: range, gross_limit: float = 1.0, warmup: int = 0) -> np.ndarray:
    """Per-step log-returns of the daily-rebalanced equal-weight long portfolio.

    ``gross_limit`` is accepted for interface symmetry; the portfolio is
    always fully invested long with weights 1/N. ``warmup`` skips leading
    rows so the path lines up with agents that need state history.
    """
    r = series.universe_returns[rng.start + warmup:rng.stop]
    n = r.shape[1]
    w = np.full(n, 1.0 / n)
    return np.array([portfolio_log_return(w, row) for row in r])


# --------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    p_value: float  # percent
    df: float


def welch_from_stats(mean_b, std_b, n_b, mean_m, std_m, n_m) -> TTestResult:
    """One-sided Welch test from summary statistics; small p favours the method."""
    if n_b < 2 or n_m < 2:
        raise ValueError("each sample needs at least two observations")
    vb, vm = std_b ** 2 / n_b, std_m ** 2 / n_m
    se2 = vb + vm
    diff = mean_b - mean_m
    if se2 == 0:
        if diff == 0:
            return TTestResult(0.0, 50.0, float(n_b + n_m - 2))
        raise ValueError("both samples have zero variance but different means")
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (vb ** 2 / (n_b - 1) + vm ** 2 / (n_m - 1))
    return TTestResult(float(t), float(100.0 * stats.t.cdf(t, df)), float(df))


def welch_one_sided(baseline, method) -> TTestResult:
    b = np.asarray(baseline, dtype=float)
    m = np.asarray(method, dtype=float)
    return welch_from_stats(b.mean(), b.std(ddof=1) if len(b) > 1 else 0.0, len(b),
                            m.mean(), m.std(ddof=1) if len(m) > 1 else 0.0, len(m))


# --------------------------------------------------------------------------
# replicas


@dataclass
class ReplicaReport:
    method: str
    returns: list  # per-seed test cumulative return, percent
    seeds: list
    paths: list = field(default_factory=list)  # per-seed cumulative return path, percent
    failures: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.returns)

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns)) if self.returns else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.returns, ddof=1)) if self.n > 1 else 0.0

    def to_dict(self) -> dict:
        return {"method": self.method, "mean": self.mean, "std": self.std, "n": self.n,
                "seeds": [int(s) for s in self.seeds], "returns": [float(r) for r in self.returns],
                "paths": [[float(x) for x in p] for p in self.paths], "failures": self.failures}

    @classmethod
    def from_dict(cls, d: dict) -> "ReplicaReport":
        return cls(d["method"], d["returns"], d["seeds"], d.get("paths", []), d.get("failures", []))


def replica_seeds(master_seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(n)]


def _one_replica(spec: MethodSpec, data: Dataset, total_steps: int, seed: int):
    model = train_method(spec, data, total_steps, seed, final=True)
    rewards = evaluate(model, data.series, data.split.test, spec.env)
    return rewards


def run_replicas(spec: MethodSpec, n_seeds: int, data: Dataset, total_steps: int,
                 master_seed: int = 0, workers: int = 1) -> ReplicaReport:
    """Independently retrain ``n_seeds`` models and test each greedily."""
    if spec.method == "rp":
        rewards = rp_baseline(data.series, data.split.test, spec.env.gross_limit, spec.env.warmup)
        return ReplicaReport(spec.label, [cumulative_return(rewards)], [master_seed],
                             [return_path(rewards).tolist()])
    if n_seeds < 2:
        raise ConfigError("need at least two seeds")
    seeds = replica_seeds(master_seed, n_seeds)
    results = _map(_one_replica, [(spec, data, total_steps, s) for s in seeds], workers)
    report = ReplicaReport(spec.label, [], [])
    for s, res in zip(seeds, results):
        if isinstance(res, BaseException):
            log.warning("%s seed %d failed: %s", spec.label, s, res)
            report.failures.append({"seed": s, "error": f"{type(res).__name__}: {res}"})
            continue
        report.seeds.append(s)
        report.returns.append(cumulative_return(res))
        report.paths.append(return_path(res).tolist())
    if report.failures:
        log.warning("%s: effective n = %d of %d", spec.label, report.n, n_seeds)
    return report


def _guarded(fn, args):
    try:
        return fn(*args)
    except Exception as exc:  # recorded per run, the batch carries on
        return exc


def _map(fn, arglist, workers: int):
    if workers <= 1 or len(arglist) <= 1:
        return [_guarded(fn, a) for a in arglist]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(_guarded, fn, a) for a in arglist]
        return [f.result() for f in futs]


# --------------------------------------------------------------------------
# tuning


@dataclass(frozen=True)
class HyperparamSpace:
    grids: dict

    def __post_init__(self):
        if not self.grids:
            raise ConfigError("hyperparameter space is empty")
        for k, v in self.grids.items():
            if not len(v):
                raise ConfigError(f"grid for {k!r} is empty")
        bad = set(self.grids.get("state_lag", ())) - set(STATE_LAGS)
        if bad:
            raise ConfigError(f"state_lag grid must be within 5, 10, ..., 60; got {sorted(bad)}")

    @property
    def size(self) -> int:
        return math.prod(len(v) for v in self.grids.values())

    def point(self, index: int) -> dict:
        out = {}
        for k, v in reversed(list(self.grids.items())):
            index, j = divmod(index, len(v))
            out[k] = v[j]
        return dict(reversed(list(out.items())))

    def sample(self, budget: int, rng: np.random.Generator) -> list[dict]:
        if budget >= self.size:
            idx = rng.integers(0, self.size, budget) if budget > self.size else rng.permutation(self.size)
        else:
            idx = rng.choice(self.size, budget, replace=False)
        return [self.point(int(i)) for i in idx]


def apply_params(spec: MethodSpec, params: dict) -> MethodSpec:
    algo_fields = set(spec.algo.to_dict())
    algo_kw = {k: (tuple(v) if k == "hidden" else v) for k, v in params.items() if k in algo_fields}
    env_kw = {k: v for k, v in params.items() if k in ("state_lag", "gross_limit")}
    unknown = set(params) - algo_fields - set(env_kw)
    if unknown:
        raise ConfigError(f"unknown hyperparameters {sorted(unknown)}")
    return spec.replace(algo=spec.algo.replace(**algo_kw), env=spec.env.replace(**env_kw))


def validation_score(spec: MethodSpec, data: Dataset, tune_steps: int, seed: int, S=None) -> float:
    model = train_method(spec, data, tune_steps, seed, final=False, S=S)
    return cumulative_return(evaluate(model, data.series, data.split.validation, spec.env))


def _score(spec, data, tune_steps, seed, S=None):
    try:
        return validation_score(spec, data, tune_steps, seed, S)
    except Exception as exc:
        log.warning("tuning sample failed: %s", exc)
        return -math.inf


def random_grid_search(space: HyperparamSpace, budget: int, tune_steps: int, spec: MethodSpec,
                       data: Dataset, seed: int = 0, workers: int = 1):
    """Best parameter dict by validation return, with every (params, score) sample."""
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    points = space.sample(budget, rng)
    run_seeds = replica_seeds(seed, budget)
    args = [(apply_params(spec, p), data, tune_steps, s) for p, s in zip(points, run_seeds)]
    scores = _map(_score, args, workers)
    best = int(np.argmax(scores))  # first maximum wins ties
    return points[best], list(zip(points, scores))


def tune_tis(S_space: Sequence[int], spec: MethodSpec, data: Dataset, tune_steps: int, seed: int = 0,
             workers: int = 1):
    S_space = [int(s) for s in S_space]
    if not S_space or any(s < 1 or s > 8 for s in S_space):
        raise ConfigError("S search space must be a non-empty subset of 1..8")
    if len(S_space) == 1:
        return S_space[0], []
    spec = spec.replace(method="is")
    scores = _map(_score, [(spec, data, tune_steps, seed, S) for S in S_space], workers)
    return S_space[int(np.argmax(scores))], list(zip(S_space, scores))


def tune_sigma(sigma_space, spec: MethodSpec, data: Dataset, tune_steps: int, seed: int = 0,
               n_samples: int = 8, workers: int = 1):
    """Pick the label-noise scale by validation return.

    ``sigma_space`` is either a list of candidates or a ``(low, high)``
    interval searched with ``n_samples`` uniform draws.
    """
    if isinstance(sigma_space, dict):
        lo, hi = float(sigma_space["low"]), float(sigma_space["high"])
        if lo < 0 or hi < lo:
            raise ConfigError("sigma interval must satisfy 0 <= low <= high")
        cands = [lo] if lo == hi else list(np.random.default_rng(seed).uniform(lo, hi, n_samples))
    else:
        cands = [float(s) for s in sigma_space]
        if not cands or min(cands) < 0:
            raise ConfigError("sigma candidates must be non-negative")
    if len(cands) == 1:
        return cands[0], []
    specs = [spec.replace(method="dpd-lgn", lgn_sigma=s) for s in cands]
    scores = _map(_score, [(s, data, tune_steps, seed) for s in specs], workers)
    return cands[int(np.argmax(scores))], list(zip(cands, scores))


# --------------------------------------------------------------------------
# reports

CSV_HEADER = ("method", "mean", "std", "n", "t_stat", "p_value_pct")


def compare_to_baseline(reports: Sequence[ReplicaReport], baseline: str) -> dict:
    base = next((r for r in reports if r.method == baseline), None)
    tests = {}
    if base is None or base.n < 2:
        return tests
    for r in reports:
        if r.method != baseline and r.n >= 2:
            tests[r.method] = welch_one_sided(base.returns, r.returns)
    return tests


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def emit_report(reports: Sequence[ReplicaReport], tests: dict, out_dir) -> list[str]:
    if not reports:
        raise ValueError("nothing to report")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    path = os.path.join(out_dir, "results.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in reports:
            t = tests.get(r.method)
            w.writerow([r.method, _fmt(r.mean), _fmt(r.std), r.n,
                        _fmt(t.t_stat if t else None), _fmt(t.p_value if t else None)])
    written.append(path)
    path = os.path.join(out_dir, "results.json")
    payload = {"reports": [r.to_dict() for r in reports],
               "tests": {k: {"t_stat": v.t_stat, "p_value_pct": v.p_value, "df": v.df}
                         for k, v in tests.items()}}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(path)
    for r in reports:
        if not r.paths:
            continue
        d = os.path.join(out_dir, _safe(r.method))
        os.makedirs(d, exist_ok=True)
        path = os.path.join(d, "equity_curve.svg")
        with open(path, "w") as fh:
            fh.write(equity_svg(r))
        written.append(path)
    return written


def load_report(out_dir) -> tuple[list[ReplicaReport], dict]:
    with open(os.path.join(out_dir, "results.json")) as fh:
        payload = json.load(fh)
    reports = [ReplicaReport.from_dict(d) for d in payload["reports"]]
    tests = {k: TTestResult(v["t_stat"], v["p_value_pct"], v["df"]) for k, v in payload["tests"].items()}
    return reports, tests


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def equity_svg(report: ReplicaReport, width=640, height=360, pad=40) -> str:
    """Mean cumulative-return path with a per-step +/- 1 sigma band."""
    paths = np.array(report.paths, dtype=float)
    mean = paths.mean(axis=0)
    sd = paths.std(axis=0, ddof=1) if len(paths) > 1 else np.zeros_like(mean)
    lo, hi = mean - sd, mean + sd
    ymin, ymax = float(min(lo.min(), 0.0)), float(max(hi.max(), 0.0))
    if ymax - ymin < 1e-9:
        ymax = ymin + 1.0
    n = len(mean)

    def xy(i, v):
        x = pad + (width - 2 * pad) * (i / max(n - 1, 1))
        y = height - pad - (height - 2 * pad) * (v - ymin) / (ymax - ymin)
        return f"{x:.2f},{y:.2f}"

    band = " ".join([xy(i, v) for i, v in enumerate(hi)] + [xy(i, v) for i, v in reversed(list(enumerate(lo)))])
    line = " ".join(xy(i, v) for i, v in enumerate(mean))
    zero = xy(0, 0.0).split(",")[1]
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<text x="{pad}" y="{pad / 2:.0f}" font-size="14">{report.method}: test cumulative return (%), '
        f'mean {report.mean:.3f} +/- {report.std:.3f}, n={report.n}</text>\n'
        f'<line x1="{pad}" y1="{zero}" x2="{width - pad}" y2="{zero}" stroke="#999"/>\n'
        f'<polygon points="{band}" fill="#4a7ab5" fill-opacity="0.25" stroke="none"/>\n'
        f'<polyline points="{line}" fill="none" stroke="#1f4e8c" stroke-width="1.5"/>\n'
        f'<text x="4" y="{pad}" font-size="10">{ymax:.1f}</text>\n'
        f'<text x="4" y="{height - pad}" font-size="10">{ymin:.1f}</text>\n'
        "</svg>\n")
