"""Reinforcement-learning portfolio agents with oracle distillation and smoothing curricula."""
from .data import (ConfigError, DataError, DataSplit, ParseError, ProcessedSeries, RawSeries,
                   SyntheticSpec, concat, generate_synthetic, load_csv, process_raw, split)
from .env import EnvConfig, RuinError
from .rl import AlgoConfig, profile, train

__version__ = "0.1.0"

__all__ = [
    "AlgoConfig", "ConfigError", "DataError", "DataSplit", "EnvConfig", "ParseError",
    "ProcessedSeries", "RawSeries", "RuinError", "SyntheticSpec", "concat", "generate_synthetic",
    "load_csv", "process_raw", "profile", "split", "train",
]
