"""Pipeline configuration: one YAML document with a section per module."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

import yaml

from .autolabel import AdaptationConfig
from .losses import LossConfig
from .net import NetConfig
from .registration import SolverConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_clouds: int = 200
    n_primitive_points: int = 400
    noise_fraction: float = 0.02
    n_background_chunks: int = 6
    points_per_chunk: int = 100
    total_points: int = 512

    def __post_init__(self):
        if self.n_clouds <= 0 or self.total_points <= 0:
            raise ValueError("n_clouds and total_points must be positive")
        if not 0 <= self.noise_fraction < 1:
            raise ValueError("noise_fraction must be in [0, 1)")
        if self.total_points < self.n_primitive_points:
            raise ValueError("total_points must be at least n_primitive_points")


@dataclass(frozen=True)
class TrainSettings:
    """Training schedule; the seed comes from the top-level ``seed``."""

    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


@dataclass(frozen=True)
class LinesConfig:
    voxel_size: float = 0.25
    match_threshold: float = 0.1
    correspondence_distance: float = 0.2

    def __post_init__(self):
        if min(self.voxel_size, self.match_threshold, self.correspondence_distance) <= 0:
            raise ValueError("line settings must be positive")


@dataclass(frozen=True)
class EvalConfig:
    n_pairs: int = 100
    n_lines: int = 8
    extent: float = 40.0
    max_translation: float = 20.0
    train_points: int = 2048
    eval_points: int = 4096

    def __post_init__(self):
        if self.n_pairs <= 0 or self.n_lines < 4:
            raise ValueError("need n_pairs > 0 and n_lines >= 4")
        if self.extent <= 0 or self.max_translation < 0:
            raise ValueError("invalid scene size")


SECTIONS = {
    "synth": SynthConfig,
    "net": NetConfig,
    "train": TrainSettings,
    "loss": LossConfig,
    "adapt": AdaptationConfig,
    "lines": LinesConfig,
    "solver": SolverConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    loss: LossConfig = field(default_factory=LossConfig)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    lines: LinesConfig = field(default_factory=LinesConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        """Build from nested dicts; missing keys keep defaults, unknown keys fail."""
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("config document must be a mapping")
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        kwargs: Dict[str, Any] = {}
        if "seed" in data:
            if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = data["seed"]
        for name, klass in SECTIONS.items():
            if name not in data:
                continue
            section = data[name] or {}
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in dataclasses.fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            merged = {**dataclasses.asdict(getattr(base, name)), **section}
            try:
                kwargs[name] = klass(**merged)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from None
        return cls(**kwargs)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    @classmethod
    def loads(cls, text: str) -> "PipelineConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PipelineConfig":
        return cls.loads(Path(path).read_text())

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=seed)
