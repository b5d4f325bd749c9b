"""
Run configuration

A run is described by one JSON document with a schema_version field. Nested
sections map onto the dataclasses that own the settings; command-line flags
override file values and the effective configuration is written back next
to the run artifacts.
"""

from __future__ import annotations

import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, Optional

from spcoslam.base.core import Hyperparams
from spcoslam.base.dataset import DatasetConfig
from spcoslam.base.errors import ConfigError
from spcoslam.base.rbpf import FilterConfig
from spcoslam.base.world import WorldConfig

SCHEMA_VERSION = 1
METHODS = ("spcoslam", "fastslam-only", "no-lm-update", "no-features")
THREADS_ENV = "SPCOSLAM_THREADS"


@dataclass
class RunConfig:
    seed: Optional[int] = None
    method: str = "spcoslam"
    dataset_dir: Optional[str] = None
    out: str = "runs"
    max_teaching_steps: Optional[int] = None
    artifact_every: int = 25
    query_seed_offset: int = 1000
    world: WorldConfig = field(default_factory=WorldConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method {self.method!r}; choose one of {', '.join(METHODS)}")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"Unsupported config schema {self.schema_version}, expected {SCHEMA_VERSION}"
            )
        if self.artifact_every < 1:
            raise ConfigError("artifact_every must be at least 1")

    def validate(self) -> "RunConfig":
        if self.seed is None:
            raise ConfigError("A seed is required (config file or --seed)")
        return self

    def filter_for_method(self) -> FilterConfig:
        """Filter settings with the method's ablation switches applied."""
        switches = {
            "spcoslam": {},
            "fastslam-only": {"use_concepts": False},
            "no-lm-update": {"update_lm": False},
            "no-features": {"use_features": False},
        }[self.method]
        return replace(self.filter, threads=effective_threads(self.filter.threads), **switches)

    def to_dict(self) -> dict:
        return asdict(self)


def effective_threads(requested: int) -> int:
    cap = os.environ.get(THREADS_ENV)
    if not cap:
        return requested
    try:
        return max(1, min(requested, int(cap)))
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}") from e


def _build(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"Section {path or 'root'} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in {path or 'root'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if is_dataclass(hint) and isinstance(hint, type):
            kwargs[name] = _build(hint, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {path or 'config'}: {e}") from e


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise ConfigError(f"Config file {path} does not exist")
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e
    return config_from_dict(data)


def apply_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """Command-line flags win over file values; None means the flag was not given."""
    top = {
        k: v
        for k, v in overrides.items()
        if v is not None and k in ("seed", "method", "out", "dataset_dir")
    }
    config = replace(config, **top)
    if overrides.get("particles") is not None:
        config = replace(config, filter=replace(config.filter, particles=overrides["particles"]))
    if overrides.get("steps") is not None:
        steps = overrides["steps"]
        config = replace(
            config,
            max_teaching_steps=steps,
            dataset=replace(config.dataset, n_teaching_events=steps),
        )
    return config


def dump_config(config: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
