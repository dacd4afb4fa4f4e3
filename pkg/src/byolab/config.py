"""Experiment configuration: one JSON document with a section per stage."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .frontend import FrontendConfig
from .probe import EPOCH_PRESETS, ProbeConfig
from .rsa import RsaConfig
from .trainer import PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    name: str
    manifest: str
    include_pitch: bool = False
    epochs_preset: str = "default"
    binary: bool = False
    positive_label: str | None = None

    def __post_init__(self):
        if self.epochs_preset not in EPOCH_PRESETS:
            raise ConfigError(f"dataset {self.name!r}: unknown epochs preset {self.epochs_preset!r}; "
                              f"expected one of {sorted(EPOCH_PRESETS)}")

    def probe_config(self, base: ProbeConfig) -> ProbeConfig:
        return replace(base, epochs=EPOCH_PRESETS[self.epochs_preset], binary=self.binary,
                       positive_label=self.positive_label)


def _build(cls, value, section):
    if isinstance(value, cls):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"section {section!r}: unknown keys {sorted(unknown)}")
    try:
        return cls(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


@dataclass
class ExperimentConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    rsa: RsaConfig = field(default_factory=RsaConfig)
    datasets: list[DatasetConfig] = field(default_factory=list)
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        self.frontend = _build(FrontendConfig, self.frontend, "frontend")
        self.augment = _build(AugmentConfig, self.augment, "augment")
        self.pretrain = _build(PretrainConfig, self.pretrain, "pretrain")
        self.probe = _build(ProbeConfig, self.probe, "probe")
        self.rsa = _build(RsaConfig, self.rsa, "rsa")
        self.datasets = [_build(DatasetConfig, d, "datasets") for d in self.datasets]
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy whose stage seeds all derive from ``seed``."""
        return replace(self, seed=seed,
                       augment=replace(self.augment, seed=seed),
                       pretrain=replace(self.pretrain, seed=seed),
                       probe=replace(self.probe, seed=seed),
                       rsa=replace(self.rsa, seed=seed))

    def dataset(self, name: str) -> DatasetConfig:
        for d in self.datasets:
            if d.name == name:
                return d
        raise ConfigError(f"no dataset named {name!r} in config")

    def check_manifests(self, base: Path | None = None) -> None:
        for d in self.datasets:
            p = Path(d.manifest) if base is None else Path(base) / d.manifest
            if not p.is_file():
                raise ConfigError(f"dataset {d.name!r}: manifest not found: {p}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        cfg = cls.from_dict(data)
        cfg.check_manifests(path.parent)
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
