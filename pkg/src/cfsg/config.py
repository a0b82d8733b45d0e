"""JSON pipeline configuration. Every field has a default; unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .crf import CrfParams
from .imaging import DomainShiftParams, PreprocessParams, SceneSpec
from .network import ArchitectureConfig
from .training import AugmentConfig, TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MappingConfig:
    tile_size: int = 64
    overlap: int = 0
    gsd_mm_per_px: float = 1.78
    grid_px: int = 100
    grids: tuple = (100, 50, 10)
    heatmap_sigma: float = 8.0
    min_weed_pixels: int = 1
    apply_crf: bool = False
    crf_radius: int | None = None


@dataclass(frozen=True)
class SyntheticConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    base_seed: int = 1000


@dataclass(frozen=True)
class PipelineConfig:
    version: int = CONFIG_VERSION
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    training: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=16, max_epochs=20))
    preprocessing: PreprocessParams = field(default_factory=PreprocessParams)
    crf: CrfParams = field(default_factory=CrfParams)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    domain_shift: DomainShiftParams = field(default_factory=DomainShiftParams)


def _build(base, data, path: str):
    """Overlay the JSON object ``data`` onto the dataclass instance ``base``."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(base)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(base, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(current, value, f"{path}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    if "version" not in data:
        raise ConfigError("config: 'version' is mandatory")
    if data["version"] != CONFIG_VERSION:
        raise ConfigError(f"config: unsupported version {data['version']}")
    return _build(PipelineConfig(), data, "config")


def config_to_dict(cfg) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj
    return convert(cfg)


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def dump_config(cfg: PipelineConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def override(cfg, section: str, **values):
    """Copy of ``cfg`` with fields of one section replaced (``None`` values skipped)."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})


__all__ = [
    "AugmentConfig", "ConfigError", "MappingConfig", "PipelineConfig", "SyntheticConfig",
    "config_from_dict", "config_to_dict", "dump_config", "load_config", "override",
]
