"""Versioned JSON experiment configuration with fail-fast validation.

Unknown keys and ill-typed values are rejected with the dotted path of the
offending field, e.g. ``local.tau: must be >= 1``.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from frlhf.federation.aggregation import AggregationStrategy
from frlhf.harness.scenarios import MDPSettings, QuadraticSettings, RecommenderSettings
from frlhf.local import LocalConfig

SCHEMA_VERSION = 1
SCENARIOS = ("quadratic_bounds", "recommender", "lambda_sweep", "centralized_equiv")
TRANSPORTS = ("inproc", "socket")
DEFAULT_SEEDS = (0, 42, 101, 123, 4242)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class SweepSettings:
    lambdas: tuple[float, ...] = (0.05, 0.1, 0.2, 0.4, 0.8)
    slope_window: tuple[float, float] = (1.7, 2.3)
    min_r2: float = 0.9

    def __post_init__(self):
        if len(self.lambdas) < 5 or any(l < 0 for l in self.lambdas):
            raise ValueError("need at least 5 lambda values, all >= 0")
        if tuple(sorted(self.lambdas)) != tuple(self.lambdas):
            raise ValueError("lambdas must be sorted ascending")


@dataclass(frozen=True)
class RecommenderChecks:
    min_accuracy_gain: float = 0.08
    min_passing_fraction: float = 0.8


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    K: int = 5
    T: int = 5
    local: LocalConfig = field(default_factory=LocalConfig)
    lambdas: tuple[float, ...] | None = None  # per-client lambda_k; defaults to local.lam
    strategy: str = AggregationStrategy.FEDAVG_UNIFORM.value
    transport: str = "inproc"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    output_dir: str = "results"
    workers: int = 1
    quadratic: QuadraticSettings = field(default_factory=QuadraticSettings)
    recommender: RecommenderSettings = field(default_factory=RecommenderSettings)
    mdp: MDPSettings = field(default_factory=MDPSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    checks: RecommenderChecks = field(default_factory=RecommenderChecks)
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.version != SCHEMA_VERSION:
            raise ConfigError("version", f"unsupported schema version {self.version}")
        if self.scenario not in SCENARIOS:
            raise ConfigError("scenario", f"must be one of {', '.join(SCENARIOS)}")
        if self.K < 1:
            raise ConfigError("K", "must be >= 1")
        if self.T < 1:
            raise ConfigError("T", "must be >= 1")
        if self.lambdas is not None:
            if len(self.lambdas) != self.K:
                raise ConfigError("lambdas", f"needs one value per client (K={self.K}), got {len(self.lambdas)}")
            if any(l < 0 for l in self.lambdas):
                raise ConfigError("lambdas", "values must be >= 0")
        try:
            AggregationStrategy(self.strategy)
        except ValueError:
            raise ConfigError("strategy", f"unknown strategy {self.strategy!r}") from None
        if self.transport not in TRANSPORTS:
            raise ConfigError("transport", f"must be one of {', '.join(TRANSPORTS)}")
        if not self.seeds:
            raise ConfigError("seeds", "must be non-empty")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds", "must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")

    def client_config(self, k: int) -> LocalConfig:
        if self.lambdas is None:
            return self.local
        return dataclasses.replace(self.local, lam=float(self.lambdas[k]))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return build(cls, doc, "")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("", f"invalid JSON: {exc}") from exc
        return cls.from_dict(doc)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _join(path: str, name) -> str:
    return f"{path}.{name}" if path else str(name)


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        options = [a for a in args if a is not type(None)]
        errors = []
        for opt in options:
            try:
                return _coerce(opt, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(path, f"invalid value {value!r}")
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, _join(path, i)) for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, _join(path, i)) for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")


def build(cls, doc, path: str = ""):
    """Instantiate dataclass ``cls`` from a JSON object, recursively."""
    if not isinstance(doc, dict):
        raise ConfigError(path, f"expected an object, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(_join(path, unknown[0]), "unknown field")
    kwargs = {name: _coerce(hints[name], value, _join(path, name)) for name, value in doc.items()}
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(_join(path, exc.path), str(exc).split(": ", 1)[-1]) from None
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from None
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None
