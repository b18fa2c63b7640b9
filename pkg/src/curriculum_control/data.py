"""Series ingestion, return conversion, temporal splits and synthetic data.

Everything downstream consumes :class:`ProcessedSeries`: a dated matrix of
per-feature log-returns (market columns) or first differences (everything
else). Instances are immutable; slicing returns views that stay read-only.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MARKET = "market"
NON_MARKET = "non_market"
_KINDS = (MARKET, NON_MARKET)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    pass


class ConfigError(ValueError):
    """Invalid configuration value (ratios, lags, stage counts...)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


def _as_dates(dates) -> np.ndarray:
    d = np.asarray(dates, dtype="datetime64[D]").copy()
    d.flags.writeable = False
    return d


def _check_kinds(columns, kinds):
    if len(columns) != len(kinds):
        raise DataError("one feature kind per column is required")
    for c, k in zip(columns, kinds):
        if k not in _KINDS:
            raise DataError(f"column {c!r}: unknown feature kind {k!r}")
    if len(set(columns)) != len(columns):
        raise DataError("duplicate column names")


@dataclass(frozen=True)
class RawSeries:
    dates: np.ndarray
    values: np.ndarray  # (T, F), NaN = missing
    columns: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "dates", _as_dates(self.dates))
        object.__setattr__(self, "values", _frozen(np.atleast_2d(self.values)))
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        _check_kinds(self.columns, self.kinds)
        if self.values.shape != (len(self.dates), len(self.columns)):
            raise DataError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.dates)} dates x {len(self.columns)} columns")
        if len(self.dates) > 1 and not np.all(np.diff(self.dates) > np.timedelta64(0, "D")):
            raise DataError("dates must be strictly increasing")
        for j, (c, k) in enumerate(zip(self.columns, self.kinds)):
            if k != MARKET:
                continue
            col = self.values[:, j]
            valid = np.flatnonzero(~np.isnan(col))
            if len(valid) and np.isnan(col[valid[0]:]).any():
                bad = valid[0] + int(np.flatnonzero(np.isnan(col[valid[0]:]))[0])
                raise DataError(f"market column {c!r} has a missing value at row {bad}")

    def __len__(self):
        return len(self.dates)


@dataclass(frozen=True)
class ProcessedSeries:
    dates: np.ndarray
    values: np.ndarray  # (T, F)
    columns: tuple[str, ...]
    kinds: tuple[str, ...]
    universe: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "dates", _as_dates(self.dates))
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals.reshape(-1, len(self.columns))
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "universe", tuple(self.universe))
        _check_kinds(self.columns, self.kinds)
        if self.values.shape != (len(self.dates), len(self.columns)):
            raise DataError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.dates)} dates x {len(self.columns)} columns")
        if np.isnan(self.values).any():
            raise DataError("processed series may not contain missing values")
        for u in self.universe:
            if u not in self.columns:
                raise DataError(f"universe column {u!r} is not in the series")
            if self.kinds[self.columns.index(u)] != MARKET:
                raise DataError(f"universe column {u!r} must be a market column")

    def __len__(self):
        return len(self.dates)

    @property
    def market_columns(self) -> tuple[str, ...]:
        return tuple(c for c, k in zip(self.columns, self.kinds) if k == MARKET)

    @property
    def non_market_columns(self) -> tuple[str, ...]:
        return tuple(c for c, k in zip(self.columns, self.kinds) if k == NON_MARKET)

    def indices(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.columns.index(n) for n in names], dtype=int)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    @property
    def universe_returns(self) -> np.ndarray:
        """(T, N) log-returns of the tradable universe."""
        return self.values[:, self.indices(self.universe)]

    def slice(self, start: int, stop: int) -> "ProcessedSeries":
        return self.with_values(self.values[start:stop], dates=self.dates[start:stop])

    def with_values(self, values, dates=None) -> "ProcessedSeries":
        return ProcessedSeries(self.dates if dates is None else dates, values,
                               self.columns, self.kinds, self.universe)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", *self.columns])
            for d, row in zip(self.dates, self.values):
                w.writerow([str(d), *(repr(float(x)) for x in row)])


@dataclass(frozen=True)
class DataSplit:
    train: range
    validation: range
    test: range

    def __iter__(self):
        return iter((self.train, self.validation, self.test))


@dataclass(frozen=True)
class SyntheticSpec:
    """Returns = signal + noise per asset.

    Each asset has an observable driver ``z`` following a unit-variance AR(1)
    with coefficient ``ar_coef``; the signal at ``t`` is
    ``signal_scale * z[t-1]``, so the previous row of the driver columns
    predicts the signal exactly. With ``drivers=False`` the driver columns
    are left out of the series and the drift must be inferred from past
    returns.
    """
    n_assets: int = 4
    length: int = 2000
    ar_coef: float = 0.9
    signal_scale: float = 0.01
    noise_scale: float = 0.0
    seed: int = 0
    drivers: bool = True

    def __post_init__(self):
        if self.n_assets < 1:
            raise ConfigError("n_assets must be >= 1")
        if self.length < 10:
            raise ConfigError("length must be >= 10")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if not -1 < self.ar_coef < 1:
            raise ConfigError("ar_coef must lie in (-1, 1)")


@dataclass(frozen=True)
class GroundTruth:
    signal: np.ndarray  # (T, N)
    noise: np.ndarray  # (T, N)
    drivers: np.ndarray  # (T, N)

    def noise_to_signal(self) -> float:
        return float(np.std(self.noise) / np.std(self.signal))


def load_csv(path, kinds: Mapping[str, str]) -> RawSeries:
    """Read ``date,<feat1>,...`` with ISO dates; empty cells are missing.

    Columns absent from ``kinds`` default to non-market. Rows are sorted by
    date; duplicate dates are rejected.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 2:
            raise ParseError(f"{path}: need a date column and at least one feature")
        columns = header[1:]
        dates, rows = [], []
        for lineno, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"row {lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                dates.append(dt.date.fromisoformat(rec[0].strip()))
            except ValueError:
                raise ParseError(f"row {lineno}: malformed date {rec[0]!r}") from None
            vals = []
            for col, cell in zip(columns, rec[1:]):
                cell = cell.strip()
                if not cell:
                    vals.append(math.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"row {lineno}, column {col!r}: non-numeric value {cell!r}") from None
            rows.append(vals)
    if not dates:
        raise ParseError(f"{path}: no data rows")
    order = sorted(range(len(dates)), key=dates.__getitem__)
    dates = [dates[i] for i in order]
    for a, b in zip(dates, dates[1:]):
        if a == b:
            raise DataError(f"duplicate date {a.isoformat()}")
    values = np.array([rows[i] for i in order], dtype=float)
    unknown = set(kinds) - set(columns)
    if unknown:
        raise DataError(f"kind map names unknown columns: {sorted(unknown)}")
    return RawSeries(np.array(dates, dtype="datetime64[D]"), values, columns,
                     [kinds.get(c, NON_MARKET) for c in columns])


def process_raw(raw: RawSeries, universe: Sequence[str] = ()) -> ProcessedSeries:
    """Log-returns for market columns, differences for the rest.

    A missing non-market value is differenced against the most recent valid
    predecessor; rows before a column's first valid value are zero-filled.
    The first timestep is dropped.
    """
    if len(raw) < 2:
        raise DataError("need at least 2 rows")
    out = np.empty((len(raw) - 1, len(raw.columns)))
    for j, (name, kind) in enumerate(zip(raw.columns, raw.kinds)):
        x = raw.values[:, j]
        valid = ~np.isnan(x)
        if not valid.any():
            raise DataError(f"column {name!r} is entirely missing")
        if kind == MARKET:
            if np.any(x[valid] <= 0):
                raise DataError(f"market column {name!r} has non-positive prices")
            with np.errstate(invalid="ignore"):
                d = np.log(x[1:] / x[:-1])
        else:
            # forward-fill so each row differences against the last valid value
            idx = np.where(valid, np.arange(len(x)), -1)
            np.maximum.accumulate(idx, out=idx)
            filled = np.where(idx >= 0, x[np.maximum(idx, 0)], np.nan)
            d = filled[1:] - filled[:-1]
        out[:, j] = np.nan_to_num(d, nan=0.0)
    return ProcessedSeries(raw.dates[1:], out, raw.columns, raw.kinds, universe)


def split(series, ratios=(0.6, 0.2, 0.2), min_length: int = 0) -> DataSplit:
    """Contiguous train/validation/test ranges; remainder rows go to train.

    Ranges shorter than ``min_length`` (typically the state lag) are a
    configuration error; with the default 0, very short series may yield
    empty validation or test ranges.
    """
    n = series if isinstance(series, int) else len(series)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("need three positive split ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    out = DataSplit(range(0, n_train), range(n_train, n_train + n_val),
                    range(n_train + n_val, n))
    for name, r in zip(("train", "validation", "test"), out):
        if len(r) < min_length:
            raise ConfigError(f"{name} range has {len(r)} rows, need >= {min_length}")
    return out


def generate_synthetic(spec: SyntheticSpec) -> tuple[ProcessedSeries, GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    T, N, phi = spec.length, spec.n_assets, spec.ar_coef
    shocks = rng.standard_normal((T + 1, N))
    z = np.empty((T + 1, N))
    z[0] = shocks[0]
    innov = math.sqrt(1.0 - phi * phi)
    for t in range(1, T + 1):
        z[t] = phi * z[t - 1] + innov * shocks[t]
    signal = spec.signal_scale * z[:-1]
    drivers = z[1:]
    noise = spec.noise_scale * rng.standard_normal((T, N))
    returns = signal + noise
    assets = [f"asset_{i}" for i in range(N)]
    dates = np.datetime64("2000-01-03") + np.arange(T)
    if spec.drivers:
        cols = assets + [f"driver_{i}" for i in range(N)]
        kinds = [MARKET] * N + [NON_MARKET] * N
        series = ProcessedSeries(dates, np.hstack([returns, drivers]), cols, kinds, assets)
    else:
        series = ProcessedSeries(dates, returns, assets, [MARKET] * N, assets)
    return series, GroundTruth(_frozen(signal), _frozen(noise), _frozen(drivers))


def concat(a: ProcessedSeries, b: ProcessedSeries) -> ProcessedSeries:
    if (a.columns, a.kinds, a.universe) != (b.columns, b.kinds, b.universe):
        raise DataError("cannot concatenate series with different schemas")
    if len(b) == 0:
        return a
    if len(a) == 0:
        return b
    if not a.dates[-1] < b.dates[0]:
        raise DataError("first series must end before the second begins")
    return a.with_values(np.vstack([a.values, b.values]),
                         dates=np.concatenate([a.dates, b.dates]))


def load_processed_csv(path, kinds: Mapping[str, str], universe: Sequence[str]) -> ProcessedSeries:
    raw = load_csv(path, kinds)
    if np.isnan(raw.values).any():
        raise DataError(f"{path}: processed series contains missing values")
    return ProcessedSeries(raw.dates, raw.values, raw.columns, raw.kinds, universe)
