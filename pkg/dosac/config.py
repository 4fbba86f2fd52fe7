"""Run configuration: nested dataclasses, presets shipped as package data, and layered resolution.

Layers are merged in the order preset, command-line flags, configuration file; later layers win.
"""

from __future__ import annotations

import copy
import dataclasses
import os
import typing
from pathlib import Path

import yaml

from .constants import (
    OUTPUT_ROOT_ENV,
    Activation,
    Algorithm,
    AlphaMode,
    EnvironmentId,
    Preset,
    PseudoPastAnchor,
    StoredAction,
)
from .envs import ConfounderConfig, EnvConfig
from .errors import ConfigError
from .utils import DataFile


@dataclasses.dataclass
class NetworkConfig:
    """Hidden layer sizes of the actor and reconstructor, and of the critics."""

    hidden_sizes: typing.List[int] = dataclasses.field(default_factory=lambda: [64, 64])
    critic_hidden_sizes: typing.List[int] = dataclasses.field(default_factory=lambda: [64, 64])
    activation: Activation = Activation.Tanh


@dataclasses.dataclass
class EvalConfig:
    #: environment steps between evaluations, 0 evaluates only at the end
    interval: int = 5000
    episodes: int = 10


@dataclasses.dataclass
class RunConfig:
    """Every setting of an experiment."""

    algorithm: Algorithm = Algorithm.DoSAC
    env: EnvConfig = dataclasses.field(default_factory=EnvConfig)
    network: NetworkConfig = dataclasses.field(default_factory=NetworkConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    recon_lr: float = 3e-4
    alpha_lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256
    buffer_capacity: int = 100_000
    total_steps: int = 50_000
    warmup_steps: int = 1000
    updates_per_step: int = 1
    max_episodes: int = 10_000
    #: pseudo-past draws of the log-probability estimate
    n_log_prob_samples: int = 1
    alpha: float = 0.2
    alpha_mode: AlphaMode = AlphaMode.Fixed
    anchor: PseudoPastAnchor = PseudoPastAnchor.Current
    joint_training: bool = False
    twin_critics: bool = True
    stored_action: StoredAction = StoredAction.Nominal
    seeds: typing.List[int] = dataclasses.field(default_factory=lambda: [0])
    output_dir: str = "runs"
    preset: Preset = Preset.Desk

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Build a configuration from plain values; missing keys keep their defaults.

        :raises ConfigError: Listing every unknown key and unparsable value.
        """
        violations: typing.List[str] = []
        config = _build(cls, data or {}, "", violations)
        if violations:
            raise ConfigError(violations)
        return config

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        return cls.from_dict(read_yaml(path))

    def to_yaml(self, path=None) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=False)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text

    def violations(self) -> typing.List[str]:
        problems = []
        positive = {
            "batch_size": self.batch_size,
            "buffer_capacity": self.buffer_capacity,
            "updates_per_step": self.updates_per_step,
            "max_episodes": self.max_episodes,
            "n_log_prob_samples": self.n_log_prob_samples,
            "eval.episodes": self.eval.episodes,
            "env.max_steps": self.env.max_steps,
        }
        problems += [f"{name} must be at least 1, got {value}" for name, value in positive.items() if value < 1]
        nonNegative = {
            "total_steps": self.total_steps,
            "warmup_steps": self.warmup_steps,
            "eval.interval": self.eval.interval,
        }
        problems += [f"{name} must be non-negative, got {value}" for name, value in nonNegative.items() if value < 0]
        rates = {
            "actor_lr": self.actor_lr,
            "critic_lr": self.critic_lr,
            "recon_lr": self.recon_lr,
            "alpha_lr": self.alpha_lr,
        }
        problems += [f"{name} must be non-negative, got {value}" for name, value in rates.items() if not value >= 0.0]
        if not 0.0 <= self.gamma < 1.0:
            problems.append(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            problems.append(f"tau must lie in (0, 1], got {self.tau}")
        if not self.alpha > 0.0:
            problems.append(f"alpha must be positive, got {self.alpha}")
        if not self.env.dt > 0.0:
            problems.append(f"env.dt must be positive, got {self.env.dt}")
        if not self.seeds:
            problems.append("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            problems.append(f"seeds must be distinct, got {self.seeds}")
        for name, sizes in (
            ("network.hidden_sizes", self.network.hidden_sizes),
            ("network.critic_hidden_sizes", self.network.critic_hidden_sizes),
        ):
            if any(size < 1 for size in sizes):
                problems.append(f"{name} must hold positive sizes, got {sizes}")
        problems += self.env.confounder.violations("env.confounder")
        return problems

    def validate(self) -> "RunConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def output_root(self) -> Path:
        """The output directory, overridden by the ``DOSAC_OUTPUT_ROOT`` environment variable."""
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_dir)

    def for_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seeds=[int(seed)])


_ENUMS = (Algorithm, Activation, AlphaMode, EnvironmentId, Preset, PseudoPastAnchor, StoredAction)


def _plain(value):
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, _ENUMS):
        return value.label
    return value


def _build(cls, data: dict, prefix: str, violations: typing.List[str]):
    if not isinstance(data, dict):
        violations.append(f"{prefix.rstrip('.') or 'config'} must be a mapping, got {data!r}")
        return cls()
    fields = {field.name: field for field in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    values = {}
    for key, raw in data.items():
        if key not in fields:
            violations.append(f"{prefix}{key} is not a known setting")
            continue
        kind = hints[key]
        try:
            if dataclasses.is_dataclass(kind):
                values[key] = _build(kind, raw, f"{prefix}{key}.", violations)
            elif isinstance(kind, type) and issubclass(kind, _ENUMS):
                values[key] = kind.from_name(raw)
            elif kind is bool:
                if not isinstance(raw, bool):
                    raise ValueError(f"expected true or false, got {raw!r}")
                values[key] = raw
            elif kind is int:
                if isinstance(raw, bool) or int(raw) != float(raw):
                    raise ValueError(f"expected an integer, got {raw!r}")
                values[key] = int(raw)
            elif kind is float:
                values[key] = float(raw)
            elif kind is str:
                values[key] = str(raw)
            else:
                values[key] = [int(item) for item in raw]
        except (TypeError, ValueError) as error:
            violations.append(f"{prefix}{key}: {error}")
    return cls(**values)


def read_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as error:
        raise ConfigError(f"configuration file {path} is not valid YAML: {error}") from error
    return data or {}


def merge_dicts(base: dict, override: dict) -> dict:
    """Recursive merge; values of ``override`` win.

    >>> merge_dicts({"env": {"dt": 0.05, "max_steps": 200}}, {"env": {"dt": 0.1}})
    {'env': {'dt': 0.1, 'max_steps': 200}}
    """
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_dicts(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def preset_dict(preset) -> dict:
    """The settings a preset overrides, as read from the package data."""
    preset = Preset.from_name(preset)
    data = read_yaml(DataFile(f"presets/{preset.label}.yaml"))
    data["preset"] = preset.label
    return data


def expand_preset(preset) -> RunConfig:
    return RunConfig.from_dict(preset_dict(preset))


def resolve_config(
    preset=Preset.Desk,
    flags: typing.Optional[dict] = None,
    config_file=None,
) -> RunConfig:
    """Merge preset, flags and configuration file, and validate the result.

    :param preset: Name of the base preset. A ``preset`` key in the configuration file replaces it.
    :param flags: Nested settings given on the command line.
    :param config_file: Optional YAML file with nested settings.
    :return: The validated configuration.
    """
    fileData = read_yaml(config_file) if config_file is not None else {}
    preset = fileData.get("preset", (flags or {}).get("preset", preset))
    merged = merge_dicts(merge_dicts(preset_dict(preset), flags or {}), fileData)
    return RunConfig.from_dict(merged).validate()


__all__ = [
    "ConfounderConfig",
    "EnvConfig",
    "EvalConfig",
    "NetworkConfig",
    "RunConfig",
    "expand_preset",
    "merge_dicts",
    "preset_dict",
    "read_yaml",
    "resolve_config",
]
