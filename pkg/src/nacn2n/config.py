"""Layered run configuration.

Values resolve in order: built-in defaults, then a JSON config file, then
dotted command-line overrides (``--train.epochs=8``), and finally the
NACN2N_SEED environment variable, which forces every seed field and is
logged when it does. Validation errors name the offending key.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .experiments import DataConfig, ExperimentPlan
from .models import BackboneConfig
from .noise import NoiseSpec
from .training import TrainConfig

SEED_ENV_VAR = "NACN2N_SEED"


@dataclass(frozen=True)
class ExperimentSettings:
    name: str = "experiment"
    axis: str = "none"
    axis_values: tuple = ()
    scale: str = "desk"
    output_dir: str = "runs"
    master_seed: int = 0
    chain_length: int = 5

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "axis": self.axis,
            "axis_values": list(self.axis_values),
            "scale": self.scale,
            "output_dir": self.output_dir,
            "master_seed": self.master_seed,
            "chain_length": self.chain_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSettings":
        kwargs = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "axis_values" in kwargs:
            kwargs["axis_values"] = tuple(kwargs["axis_values"])
        return cls(**kwargs)


_SECTIONS = {
    "noise": NoiseSpec,
    "data": DataConfig,
    "model": BackboneConfig,
    "train": TrainConfig,
    "experiment": ExperimentSettings,
}


@dataclass(frozen=True)
class RootConfig:
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: BackboneConfig = field(default_factory=lambda: BackboneConfig("unet"))
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def to_dict(self) -> dict:
        return {
            "noise": self.noise.to_dict(),
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "experiment": self.experiment.to_dict(),
        }

    def to_plan(self, **overrides) -> ExperimentPlan:
        """Assemble the experiment plan this configuration describes."""
        exp = self.experiment
        kwargs = {
            "name": exp.name,
            "axis": exp.axis,
            "axis_values": exp.axis_values,
            "scale": exp.scale,
            "output_dir": exp.output_dir,
            "master_seed": exp.master_seed,
            "chain_length": exp.chain_length,
            "data": self.data,
            "noise": self.noise,
            "model": self.model,
            "train": self.train,
        }
        kwargs.update(overrides)
        return ExperimentPlan(**kwargs)


def _defaults() -> dict:
    return RootConfig().to_dict()


def _known_keys(section: str) -> tuple:
    return tuple(_SECTIONS[section].__dataclass_fields__)


def _check_key(section: str, key: str) -> None:
    if section not in _SECTIONS:
        raise ConfigError(
            f"unknown config section '{section}'; expected one of {sorted(_SECTIONS)}"
        )
    if key not in _known_keys(section):
        raise ConfigError(
            f"unknown config key '{section}.{key}'; "
            f"known keys: {', '.join(_known_keys(section))}"
        )


def _merge_file(tree: dict, path) -> None:
    try:
        loaded = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    for section, values in loaded.items():
        if not isinstance(values, dict):
            raise ConfigError(f"config section '{section}' must be a JSON object")
        for key, value in values.items():
            _check_key(section, key)
            tree[section][key] = value


def parse_override(token: str) -> tuple[str, str, object]:
    """Split one ``section.key=value`` override; values parse as JSON when
    they can, and stay strings otherwise."""
    if "=" not in token:
        raise ConfigError(f"override '{token}' must look like section.key=value")
    dotted, raw = token.split("=", 1)
    dotted = dotted.lstrip("-")
    if dotted.count(".") != 1:
        raise ConfigError(f"override key '{dotted}' must look like section.key")
    section, key = dotted.split(".")
    _check_key(section, key)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def load_config(
    path=None, overrides: list[str] = (), env: dict | None = None
) -> tuple[RootConfig, list[str]]:
    """Resolve the configuration; returns it with log lines describing any
    environment-driven substitutions."""
    env = os.environ if env is None else env
    tree = _defaults()
    if path is not None:
        _merge_file(tree, path)
    for token in overrides:
        section, key, value = parse_override(token)
        tree[section][key] = value

    log_lines = []
    if SEED_ENV_VAR in env:
        raw = env[SEED_ENV_VAR]
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None
        tree["experiment"]["master_seed"] = seed
        tree["train"]["seed"] = seed
        tree["noise"]["seed"] = seed
        log_lines.append(
            f"seed overridden by {SEED_ENV_VAR}={seed} "
            "(experiment.master_seed, train.seed, noise.seed)"
        )

    sections = {}
    for name, cls in _SECTIONS.items():
        try:
            sections[name] = cls.from_dict(tree[name])
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value in config section '{name}': {exc}") from exc
    return RootConfig(**sections), log_lines
