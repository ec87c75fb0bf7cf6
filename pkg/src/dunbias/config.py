"""Experiment configuration: a flat INI file with one section per experiment."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

EXPERIMENT_KINDS = ("alb", "ofb", "downstream", "temp-sweep", "posteriors")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str = "downstream"
    dataset: str = "boston"
    model: str = "dun"
    objective: str = "standard"
    temperature: float = 10.0
    temperatures: tuple[float, ...] = (1.0, 10.0, 100.0, 10000.0)
    proposal: str = "bald"
    repetitions: int = 40
    seed: int = 0
    # dataset schedule; None means the dataset's default
    init_train_size: int | None = None
    n_queries: int | None = None
    query_size: int | None = None
    # optimisation
    iterations: int = 1000
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    checkpoint_every: int = 10
    # architecture
    width: int = 100
    dun_depth: int = 10
    mcdo_hidden: int = 3
    dropout_p: float = 0.1
    mc_samples: int = 10
    depth_prior: str = "uniform"
    # active-learning-bias experiment
    alb_train_size: int = 1000
    alb_m_step: int = 10
    alb_draws: int = 1000
    # ofb compares these model kinds
    ofb_models: tuple[str, ...] = ("dun", "mcdo")
    force_unit_weights: bool = False
    max_failed_reps: int = 0
    workers: int = 1
    output_dir: str = "results"
    data_dir: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.model not in ("dun", "mcdo"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.objective not in ("standard", "lure"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.proposal not in ("bald", "uniform"):
            raise ConfigError(f"unknown proposal {self.proposal!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not self.temperature > 0 or any(not t > 0 for t in self.temperatures):
            raise ConfigError("temperatures must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for m in self.ofb_models:
            if m not in ("dun", "mcdo"):
                raise ConfigError(f"unknown model {m!r} in ofb_models")

    def replay_dict(self) -> dict:
        """Fields that determine results (execution knobs excluded)."""
        d = dataclasses.asdict(self)
        for k in ("workers", "output_dir", "max_failed_reps", "data_dir"):
            d.pop(k)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.replay_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def echo(self) -> dict:
        return dataclasses.asdict(self)


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    default = ExperimentConfig.__dataclass_fields__[name].default
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(p) for p in parts)
            return tuple(parts)
        if name in ("init_train_size", "n_queries", "query_size"):
            return None if raw.strip().lower() in ("", "none", "default") else int(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return raw.strip()


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | Path | None, kind: str, overrides=None) -> ExperimentConfig:
    """Read ``[DEFAULT]`` plus the section named after ``kind`` and apply overrides."""
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        items = dict(parser.defaults())
        if parser.has_section(kind):
            items.update(parser.items(kind))
        for key, raw in items.items():
            if key not in FIELDS:
                raise ConfigError(f"unknown config key {key!r} in {path}")
            values[key] = _coerce(key, raw)
    values.update(parse_overrides(overrides) if not isinstance(overrides, dict) else overrides)
    values["kind"] = kind
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
