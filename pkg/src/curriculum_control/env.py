"""Constrained portfolio MDP over a processed series.

The agent picks a position in {-1, 0, 1} per tradable asset; the action is
linearly normalised to gross exposure ``gross_limit`` and the reward is the
portfolio's log-return over the next row.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import ConfigError, ProcessedSeries

REWARD_HOOKS = ("env_return", "dpd", "opd")


class RuinError(ArithmeticError):
    """Portfolio value hit zero (possible only with leverage)."""


class EnvUsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    universe: tuple[str, ...]
    market_columns: tuple[str, ...]
    non_market_columns: tuple[str, ...] = ()
    state_lag: int = 10
    gross_limit: float = 1.0
    reward_hook: str = "env_return"
    opd_coef: float = 0.5
    linear_reward: bool = False
    # "lagged": student state built from rows < t; "oracle": the row-t universe returns
    observation: str = "lagged"

    def __post_init__(self):
        object.__setattr__(self, "universe", tuple(self.universe))
        object.__setattr__(self, "market_columns", tuple(self.market_columns))
        object.__setattr__(self, "non_market_columns", tuple(self.non_market_columns))
        if not set(self.universe) <= set(self.market_columns):
            raise ConfigError("universe must be a subset of the market columns")
        if not self.universe:
            raise ConfigError("universe is empty")
        if self.state_lag < 5 or self.state_lag > 60 or self.state_lag % 5:
            raise ConfigError(f"state_lag must be one of 5, 10, ..., 60, got {self.state_lag}")
        if not self.gross_limit > 0:
            raise ConfigError("gross_limit must be positive")
        if self.reward_hook not in REWARD_HOOKS:
            raise ConfigError(f"unknown reward hook {self.reward_hook!r}")
        if self.opd_coef < 0:
            raise ConfigError("opd_coef must be >= 0")
        if self.observation not in ("lagged", "oracle"):
            raise ConfigError(f"unknown observation mode {self.observation!r}")

    @classmethod
    def for_series(cls, series: ProcessedSeries, **kw) -> "EnvConfig":
        return cls(universe=kw.pop("universe", series.universe),
                   market_columns=series.market_columns,
                   non_market_columns=series.non_market_columns, **kw)

    @property
    def n_assets(self) -> int:
        return len(self.universe)

    @property
    def warmup(self) -> int:
        """Rows consumed before the first decision."""
        return self.state_lag if self.observation == "lagged" else 0

    @property
    def obs_dim(self) -> int:
        if self.observation == "oracle":
            return self.n_assets
        return len(self.non_market_columns) + len(self.market_columns) * len(lag_windows(self.state_lag))

    def replace(self, **kw) -> "EnvConfig":
        return replace(self, **kw)


def lag_windows(state_lag: int) -> tuple[int, ...]:
    """Trailing window lengths: 1..5, then every 5 up to the lag."""
    return tuple(range(1, 6)) + tuple(range(10, state_lag + 1, 5))


def build_observation(series: ProcessedSeries, t: int, cfg: EnvConfig) -> np.ndarray:
    """State at decision time ``t``; only rows ``< t`` are read."""
    if t < cfg.state_lag or t > len(series):
        raise IndexError(f"t={t} needs {cfg.state_lag} rows of history within {len(series)} rows")
    prev = series.values[t - 1, series.indices(cfg.non_market_columns)]
    hist = series.values[t - cfg.state_lag:t, series.indices(cfg.market_columns)]
    csum = np.cumsum(hist[::-1], axis=0)  # csum[k-1] = sum of last k rows
    lags = csum[np.array(lag_windows(cfg.state_lag)) - 1]
    return np.concatenate([prev, lags.T.reshape(-1)])


def observation_matrix(series: ProcessedSeries, cfg: EnvConfig) -> np.ndarray:
    """Row t holds the observation for decision time t (NaN where undefined)."""
    T = len(series)
    out = np.full((T + 1, cfg.obs_dim), np.nan)
    if cfg.observation == "oracle":
        out[:T] = series.universe_returns
        return out
    lag = cfg.state_lag
    if T < lag:
        return out
    nm = series.values[:, series.indices(cfg.non_market_columns)]
    mk = series.values[:, series.indices(cfg.market_columns)]
    csum = np.vstack([np.zeros((1, mk.shape[1])), np.cumsum(mk, axis=0)])
    ts = np.arange(lag, T + 1)
    blocks = [nm[ts - 1]]
    win = np.array(lag_windows(lag))
    # (len(ts), n_market, n_windows) trailing sums ending at t-1
    sums = csum[ts][:, :, None] - csum[ts[:, None] - win[None, :]].transpose(0, 2, 1)
    blocks.append(sums.reshape(len(ts), -1))
    out[lag:] = np.hstack(blocks)
    return out


def normalize_action(a, gross_limit: float = 1.0) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    gross = np.abs(a).sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(gross > 0, gross_limit * a / gross, 0.0)
    return w


def portfolio_log_return(w, log_returns, linear: bool = False) -> float:
    """ln(1 + sum_i w_i (exp(r_i) - 1)); ``linear`` gives sum_i w_i r_i instead."""
    w = np.asarray(w, dtype=float)
    r = np.asarray(log_returns, dtype=float)
    if linear:
        return float(w @ r)
    growth = 1.0 + float(w @ np.expm1(r))
    if growth <= 0.0:
        raise RuinError(f"portfolio simple return {100 * (growth - 1):.2f}% wipes out the portfolio")
    return math.log(growth)


@dataclass
class EnvState:
    series: ProcessedSeries
    start: int
    stop: int
    cfg: EnvConfig
    t: int
    log_value: float = 0.0
    done: bool = False
    oracle: Optional[np.ndarray] = None  # (stop - start, N) oracle labels aligned with the range
    obs_cache: np.ndarray = field(default=None, repr=False)
    returns: np.ndarray = field(default=None, repr=False)

    @property
    def observation(self) -> np.ndarray:
        return self.obs_cache[self.t]

    @property
    def value(self) -> float:
        """Portfolio value relative to the start of the episode."""
        return math.exp(self.log_value)

    @property
    def episode_length(self) -> int:
        return self.stop - self.start - self.cfg.warmup


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


def reset(series: ProcessedSeries, rng: range, cfg: EnvConfig, oracle=None,
          obs_cache: np.ndarray | None = None) -> EnvState:
    start, stop = rng.start, rng.stop
    if not 0 <= start < stop <= len(series):
        raise EnvUsageError(f"range {rng} outside series of length {len(series)}")
    if stop - start <= cfg.warmup + 1:
        raise EnvUsageError(f"range of {stop - start} rows too short for state lag {cfg.warmup}")
    if cfg.reward_hook != "env_return":
        if oracle is None:
            raise EnvUsageError(f"reward hook {cfg.reward_hook!r} needs oracle labels")
        oracle = np.asarray(oracle, dtype=float)
        if oracle.shape != (stop - start, cfg.n_assets):
            raise EnvUsageError(f"oracle labels of shape {oracle.shape} do not match the range")
    if obs_cache is None:
        obs_cache = observation_matrix(series, cfg)
    return EnvState(series, start, stop, cfg, start + cfg.warmup, oracle=oracle,
                    obs_cache=obs_cache, returns=series.universe_returns)


def step(state: EnvState, a) -> StepOutcome:
    if state.done:
        raise EnvUsageError("step() called on a finished episode; call reset()")
    cfg = state.cfg
    a = np.asarray(a)
    w = normalize_action(a, cfg.gross_limit)
    t = state.t
    ret = portfolio_log_return(w, state.returns[t], cfg.linear_reward)
    state.log_value += ret
    if cfg.reward_hook == "env_return":
        reward = ret
    else:
        from .imitation import dpd_reward, opd_reward
        label = state.oracle[t - state.start]
        reward = (dpd_reward(a, label) if cfg.reward_hook == "dpd"
                  else opd_reward(ret, a, label, cfg.opd_coef))
    state.t = t + 1
    state.done = state.t >= state.stop
    return StepOutcome(state.obs_cache[state.t], reward, state.done,
                       {"weights": w, "portfolio_value": state.value, "log_return": ret, "t": t})
