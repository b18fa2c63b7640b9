"""Training-data smoothers used as a curriculum.

``ema`` and ``round_returns`` work on plain arrays (column-wise for 2-D input);
the ``*_series`` helpers lift them to :class:`ProcessedSeries`. Smoothing is
only ever applied to training data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ConfigError, ProcessedSeries

METHODS = ("none", "ema", "round", "is", "tis")
MODES = ("staged", "positional")


@dataclass(frozen=True)
class SmoothingMethod:
    variant: str = "none"  # none | ema | round
    w_l: int = 5
    decimals: int = 2

    def __post_init__(self):
        if self.variant not in ("none", "ema", "round"):
            raise ConfigError(f"unknown smoothing variant {self.variant!r}")
        if self.w_l < 1:
            raise ConfigError("w_l must be >= 1")
        if self.decimals < 0:
            raise ConfigError("decimals must be >= 0")

    def apply(self, series: ProcessedSeries) -> ProcessedSeries:
        if self.variant == "ema":
            return ema_series(series, self.w_l)
        if self.variant == "round":
            return series.with_values(round_returns(series.values, self.decimals))
        return series


@dataclass(frozen=True)
class CurriculumSchedule:
    S: int
    mode: str = "staged"
    total_updates: int | None = None

    def __post_init__(self):
        if self.S < 1:
            raise ConfigError("stage count S must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown curriculum mode {self.mode!r}")
        if self.mode == "staged" and self.total_updates is not None and self.total_updates < self.S:
            raise ConfigError("staged mode needs total_updates >= S")


def ema_alpha(w_l: int) -> float:
    if w_l < 1:
        raise ConfigError(f"w_l must be >= 1, got {w_l}")
    return 2.0 / (w_l + 1)


def ema(series, w_l: int) -> np.ndarray:
    """Recursive EMA seeded with the first value; 2-D input is smoothed per column."""
    alpha = ema_alpha(w_l)
    x = np.asarray(series, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("ema needs a non-empty sequence")
    out = np.empty_like(x)
    out[0] = x[0]
    if alpha == 1.0:
        out[:] = x
        return out
    keep = 1.0 - alpha
    for t in range(1, len(x)):
        out[t] = alpha * x[t] + keep * out[t - 1]
    return out


def round_returns(series, d: int = 2) -> np.ndarray:
    """Round half away from zero to ``d`` decimals."""
    if d < 0:
        raise ConfigError("decimals must be >= 0")
    x = np.asarray(series, dtype=float)
    scale = 10.0 ** d
    scaled = np.abs(x) * scale
    # guard against representation error (0.015 * 100 == 1.4999999999999998)
    nudged = np.nextafter(np.nextafter(scaled, np.inf), np.inf)
    return np.sign(x) * np.floor(nudged + 0.5) / scale


def ema_series(series: ProcessedSeries, w_l: int) -> ProcessedSeries:
    if len(series) == 0:
        return series
    return series.with_values(ema(series.values, w_l))


def inverse_smooth_positional(series: ProcessedSeries, S: int) -> ProcessedSeries:
    """Smooth S contiguous partitions with w_l = S, S-1, ..., 1.

    The last partition absorbs the remainder rows and is left unsmoothed.
    """
    n = len(series)
    if S < 1 or S > n:
        raise ConfigError(f"S must lie in [1, {n}], got {S}")
    size = n // S
    out = np.array(series.values, copy=True)
    for i in range(S):
        lo = i * size
        hi = n if i == S - 1 else lo + size
        out[lo:hi] = ema(out[lo:hi], S - i)
    return series.with_values(out)


def stage_schedule(S: int, total_updates: int) -> list[tuple[int, int]]:
    """(w_l, budget) per stage, most smoothed first; earlier stages take the remainder."""
    if S < 1:
        raise ConfigError("stage count S must be >= 1")
    if total_updates < S:
        raise ConfigError(f"total_updates ({total_updates}) must be >= S ({S})")
    base, extra = divmod(total_updates, S)
    return [(S - i, base + (1 if i < extra else 0)) for i in range(S)]
