"""Pipeline configuration: TOML file + command-line overrides.

Unknown keys are rejected at load time; the resolved configuration is embedded
in every state directory so runs are auditable and reproducible.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib  # type: ignore


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_dir: str = "out/data"
    state_dir: str = "out/state"


@dataclass
class SynthConfig:
    n_vertices: int = 1002
    n_modes: int = 15
    mode_scale_max: float = 0.05
    mode_scale_min: float = 0.004
    n_bumps: int = 3
    bump_scale: float = 0.012
    pose_jitter: float = 0.06
    trans_jitter: float = 0.01
    n_r_pca: int = 100
    n_r_deform: int = 100
    n_r_eval: int = 229
    n_unregistered: int = 200
    density: int = 3000
    noise_std: float = 0.002


@dataclass
class SpaceConfig:
    k: int = 11


@dataclass
class FitConfig:
    max_outer: int = 200
    inner_steps: int = 12


@dataclass
class NjfSection:
    epochs: int = 150
    learning_rate: float = 1e-4
    seed: int = 0


@dataclass
class BootstrapSection:
    n_rounds: int = 5
    batch_size: int = 100
    registration_method: str = "njf"
    eval_every_round: bool = True
    baseline_weight: float = 0.1
    baseline_iterations: int = 300


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    space: SpaceConfig = field(default_factory=SpaceConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    njf: NjfSection = field(default_factory=NjfSection)
    bootstrap: BootstrapSection = field(default_factory=BootstrapSection)
    seed: int = 0
    jobs: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _apply(section, values: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(section)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key {where}{key!r}")
        current = getattr(section, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a table")
            _apply(current, value, where=f"{where}{key}.")
        else:
            expected = type(current)
            if expected is float and isinstance(value, int):
                value = float(value)
            if expected is not type(value):
                raise ConfigError(
                    f"{where}{key} expects {expected.__name__}, got {type(value).__name__}"
                )
            setattr(section, key, value)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read TOML (optional), then apply dotted-key overrides (flags win)."""
    config = PipelineConfig()
    if path is not None:
        with Path(path).open("rb") as fh:
            data = tomllib.load(fh)
        _apply(config, data, where="")
    for dotted, value in (overrides or {}).items():
        section = config
        *parents, leaf = dotted.split(".")
        for name in parents:
            if not hasattr(section, name):
                raise ConfigError(f"unknown config key {dotted!r}")
            section = getattr(section, name)
        _apply(section, {leaf: value}, where=dotted.rsplit(".", 1)[0] + "." if parents else "")
    return config
