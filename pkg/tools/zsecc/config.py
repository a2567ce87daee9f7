"""Environment defaults and the key=value experiment config file."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigurationError

ROOT_DIR = Path(__file__).parent.parent.parent
load_dotenv(ROOT_DIR / ".env")

DEFAULT_SEED = int(os.environ.get("ZSECC_SEED", "42"))
DATA_DIR = os.environ.get("ZSECC_DATA_DIR") or None
OUTPUT_DIR = Path(os.environ.get("ZSECC_OUTPUT_DIR", str(ROOT_DIR / "data" / "output")))
LOG_LEVEL = os.environ.get("ZSECC_LOG_LEVEL", "INFO").upper()
LOG_FILE = os.environ.get("ZSECC_LOG_FILE") or None
WORKERS = int(os.environ.get("ZSECC_WORKERS", "1"))

DEFAULT_RATES = (1e-6, 1e-5, 1e-4, 1e-3)
DEFAULT_STRATEGIES = ("faulty", "zero", "ecc", "in-place")


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.split(",") if x.strip())


def _names(raw: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in raw.split(",") if x.strip())


# config-file key -> (field name, parser)
_KEYS: dict[str, tuple[str, Any]] = {
    "DATA_DIR": ("data_dir", str),
    "SYNTHETIC_SEED": ("synthetic_seed", int),
    "SYNTHETIC_TRAIN": ("synthetic_train", int),
    "SYNTHETIC_TEST": ("synthetic_test", int),
    "RATES": ("rates", _floats),
    "TRIALS": ("trials", int),
    "STRATEGIES": ("strategies", _names),
    "SCOPE": ("scope", str),
    "BASE_SEED": ("base_seed", int),
    "OUTPUT_DIR": ("output_dir", Path),
    "MODEL_NAME": ("model_name", str),
    "EPOCHS": ("epochs", int),
    "LAMBDA": ("lam", float),
    "LEARNING_RATE": ("learning_rate", float),
    "MOMENTUM": ("momentum", float),
    "BATCH_SIZE": ("batch_size", int),
    "MAX_EPOCHS": ("max_epochs", int),
    "WOT_LEARNING_RATE": ("wot_learning_rate", float),
    "EVAL_INTERVAL": ("eval_interval", int),
    "EVAL_SAMPLES": ("eval_samples", int),
    "WORKERS": ("workers", int),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines one reproducible pipeline run."""

    data_dir: str | None = DATA_DIR
    synthetic_seed: int = DEFAULT_SEED
    synthetic_train: int = 6000
    synthetic_test: int = 1000
    rates: tuple[float, ...] = DEFAULT_RATES
    trials: int = 10
    strategies: tuple[str, ...] = DEFAULT_STRATEGIES
    scope: str = "all"
    base_seed: int = DEFAULT_SEED
    output_dir: Path = field(default=OUTPUT_DIR)
    model_name: str = "reference-cnn"
    epochs: int = 3
    lam: float = 1e-4
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 20
    wot_learning_rate: float = 1e-3
    eval_interval: int = 200
    eval_samples: int = 1000
    workers: int = WORKERS

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigurationError(f"TRIALS must be >= 1, got {self.trials}")
        if any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise ConfigurationError(f"RATES must lie in [0, 1], got {self.rates}")
        if self.scope not in ("all", "weights"):
            raise ConfigurationError(f"SCOPE must be 'all' or 'weights', got {self.scope!r}")
        unknown = [s for s in self.strategies if s not in DEFAULT_STRATEGIES]
        if unknown or not self.strategies:
            raise ConfigurationError(f"STRATEGIES must be drawn from {DEFAULT_STRATEGIES}, got {self.strategies}")
        if self.workers < 1:
            raise ConfigurationError(f"WORKERS must be >= 1, got {self.workers}")

    def with_overrides(self, **overrides: Any) -> ExperimentConfig:
        """Apply CLI flag values; None means the flag was not given."""
        given = {k: v for k, v in overrides.items() if v is not None}
        known = {f.name for f in fields(self)}
        unknown = set(given) - known
        if unknown:
            raise ConfigurationError(f"Unknown config fields: {sorted(unknown)}")
        return replace(self, **given)


def load_config(path: Path | str | None = None, **overrides: Any) -> ExperimentConfig:
    """Read a KEY=value config file (if any) and apply flag overrides on top."""
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file not found: {path}")
        for key, raw in dotenv_values(path).items():
            if key not in _KEYS:
                raise ConfigurationError(f"Unknown config key: {key}")
            name, parse = _KEYS[key]
            if raw is None or raw == "":
                continue
            try:
                values[name] = parse(raw)
            except ValueError as e:
                raise ConfigurationError(f"Bad value for {key}: {raw!r} ({e})") from e
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigurationError(str(e)) from e
    return cfg.with_overrides(**overrides)
