"""Oracle trajectories, distillation rewards, label noise and noise tolerance."""
from __future__ import annotations

import itertools
from decimal import Decimal
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import ConfigError, ProcessedSeries
from .env import EnvConfig, normalize_action


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class OracleTrajectory:
    actions: np.ndarray  # (len(range), N), entries in {-1, 0, 1} unless perturbed
    range: range
    perturbed: bool = False

    def __len__(self):
        return len(self.actions)


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "dpd"
    opd_coef: float = 0.5
    lgn_sigma: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in ("dpd", "opd"):
            raise ConfigError(f"unknown distillation mode {self.mode!r}")
        if self.opd_coef < 0:
            raise ConfigError("opd coefficient must be >= 0")
        if self.lgn_sigma is not None and np.any(np.asarray(self.lgn_sigma) < 0):
            raise ConfigError("lgn sigma must be >= 0")


def _simple_returns(series: ProcessedSeries, rng: range) -> np.ndarray:
    return np.expm1(series.universe_returns[rng.start:rng.stop])


def analytic_oracle(series: ProcessedSeries, rng: range, gross_limit: float = 1.0) -> OracleTrajectory:
    """Per step, the whole gross budget on the asset with the largest |simple return|.

    Averaging can never beat the best single asset, and without costs the
    greedy per-step choice also maximises the cumulative log-return. Ties go
    to the lowest index; a row of zero returns yields no position.
    """
    s = _simple_returns(series, rng)
    best = np.argmax(np.abs(s), axis=1)
    rows = np.arange(len(s))
    a = np.zeros(s.shape, dtype=int)
    a[rows, best] = np.sign(s[rows, best]).astype(int)
    return OracleTrajectory(a, rng)


def _all_actions(n: int) -> np.ndarray:
    acts = np.array(list(itertools.product((-1, 0, 1), repeat=n)), dtype=int)
    # preference order for ties: fewest positions, then lowest asset index first
    nnz = np.abs(acts).sum(axis=1)
    first = np.where(nnz > 0, np.argmax(acts != 0, axis=1), -1)
    order = np.lexsort((first, nnz))
    return acts[order]


def brute_force_oracle(series: ProcessedSeries, rng: range, gross_limit: float = 1.0,
                       max_assets: int = 10) -> OracleTrajectory:
    n = len(series.universe)
    if n > max_assets:
        raise CapacityError(f"enumerating 3^{n} actions is too expensive (limit {max_assets} assets)")
    acts = _all_actions(n)
    w = normalize_action(acts, gross_limit)  # (3^N, N)
    s = _simple_returns(series, rng)
    growth = 1.0 + s @ w.T  # (T, 3^N)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(growth > 0, np.log(np.maximum(growth, 1e-300)), -np.inf)
    best = val.max(axis=1, keepdims=True)
    near = val >= best - 1e-12 * np.maximum(1.0, np.abs(best))
    pick = np.argmax(near, axis=1)  # first in preference order
    return OracleTrajectory(acts[pick], rng)


def dpd_reward(a, a_star) -> float:
    return -float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(a_star, dtype=float)))


def opd_reward(env_reward: float, a, a_star, c: float = 0.5) -> float:
    return env_reward + c * dpd_reward(a, a_star)


def lgn_perturb(traj: OracleTrajectory, sigma, rng: np.random.Generator) -> OracleTrajectory:
    """Add fixed zero-mean Gaussian noise with per-asset std ``sigma`` to every label."""
    n = traj.actions.shape[1]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,)) if np.ndim(sigma) == 0 \
        else np.asarray(sigma, dtype=float)
    if sigma.shape != (n,):
        raise ConfigError(f"sigma must have {n} entries")
    if np.any(sigma < 0):
        raise ConfigError("sigma must be non-negative")
    noise = rng.standard_normal(traj.actions.shape) * sigma
    return OracleTrajectory(traj.actions + noise, traj.range, perturbed=True)


def dnt(expected_moves) -> float:
    """Largest minus second-largest absolute expected move.

    The gap is taken between the shortest decimal forms of the two floats, so
    moves quoted in decimal (4.02, 3.01) give the decimal answer (1.01) rather
    than the binary rounding residue of a float subtraction.
    """
    m = np.sort(np.abs(np.asarray(expected_moves, dtype=float)).ravel())
    if m.size < 2:
        raise ConfigError("noise tolerance needs at least two assets")
    if not np.isfinite(m).all():
        raise ConfigError("expected moves must be finite")
    return float(Decimal(repr(float(m[-1]))) - Decimal(repr(float(m[-2]))))


def rl_oracle(series: ProcessedSeries, rng: range, env_cfg: EnvConfig, algo_cfg, total_steps: int,
              seed: int = 0) -> OracleTrajectory:
    """Train a future-seeing agent (state = the row's own returns) and read off its greedy actions."""
    from .rl import TrainingEnv, train

    cfg = env_cfg.replace(observation="oracle", reward_hook="env_return")
    trained = train(lambda _w: TrainingEnv(series, rng, cfg), algo_cfg, total_steps, seed)
    obs = series.universe_returns[rng.start:rng.stop]
    return OracleTrajectory(trained.predict(obs).astype(int), rng)
