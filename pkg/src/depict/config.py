"""Run configuration: one serializable tree that every artifact echoes.

A config comes from defaults, optionally a TOML file, then dotted
`--set section.key=value` overrides, in that order. The resolved tree is
written as JSON beside every output so any artifact can be reproduced from
its sidecar alone.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli

from .segment import SEGMENTERS
from .unet import ArchConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DataConfig:
    scenes: int = 2048
    min_instances: int = 1
    max_instances: int = 3
    seed: int = 0


@dataclass(frozen=True)
class ArchKnobs:
    """The architecture degrees of freedom exposed to configs."""

    channels: tuple[int, int, int, int] = (32, 64, 96, 128)
    norm_groups: int = 8

    def arch(self, in_channels: int) -> ArchConfig:
        return ArchConfig(
            in_channels=in_channels,
            channels=tuple(self.channels),
            norm_groups=self.norm_groups,
        )


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-2
    caption_dropout: float = 0.1
    seed: int = 0
    log_every: int = 100


@dataclass(frozen=True)
class ControlConfig:
    filter_rho: float = 0.5
    filter_enabled: bool = True


@dataclass(frozen=True)
class RenderConfig:
    alpha: float = 10.0
    beta: float = 0.0
    segmenter: str = "otsu"

    def __post_init__(self):
        if self.segmenter not in SEGMENTERS:
            raise ConfigError(
                f"render.segmenter must be one of {SEGMENTERS}, got {self.segmenter!r}"
            )


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance: float = 3.0


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchKnobs = field(default_factory=ArchKnobs)
    train_depth: TrainConfig = field(default_factory=TrainConfig)
    train_adapter: TrainConfig = field(default_factory=TrainConfig)
    train_rgb: TrainConfig = field(default_factory=TrainConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    out_dir: str = "runs/default"


def to_dict(cfg) -> dict:
    """Plain-JSON form (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _coerce(raw, target_type, where: str):
    """Parse a TOML value or --set string into a dataclass field's type."""
    origin = getattr(target_type, "__origin__", None)
    if origin is tuple:
        if isinstance(raw, str):
            raw = [p for p in raw.split(",") if p]
        if not isinstance(raw, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {raw!r}")
        args = target_type.__args__
        if Ellipsis not in args and len(raw) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(raw)}")
        return tuple(_coerce(v, args[0], where) for v in raw)
    if target_type is bool:
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        raise ConfigError(f"{where}: expected true/false, got {raw!r}")
    try:
        if target_type is int:
            if isinstance(raw, bool) or (isinstance(raw, float) and raw != int(raw)):
                raise ConfigError(f"{where}: expected an integer, got {raw!r}")
            return int(raw)
        if target_type is float:
            if isinstance(raw, bool):
                raise ConfigError(f"{where}: expected a number, got {raw!r}")
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {target_type.__name__}") from None
    if target_type is str:
        return str(raw)
    raise ConfigError(f"{where}: unsupported field type {target_type}")


def _field_types(dc_type) -> dict:
    return typing.get_type_hints(dc_type)


def _apply_section(section_cfg, updates: dict, section: str):
    types = _field_types(type(section_cfg))
    kwargs = {}
    for key, raw in updates.items():
        if key not in types:
            raise ConfigError(f"unknown config key {section}.{key}")
        kwargs[key] = _coerce(raw, types[key], f"{section}.{key}")
    return replace(section_cfg, **kwargs)


def _apply_tree(cfg: RunConfig, tree: dict) -> RunConfig:
    section_fields = {f.name for f in fields(RunConfig)}
    kwargs = {}
    for key, value in tree.items():
        if key not in section_fields:
            raise ConfigError(f"unknown config section {key!r}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a table")
            kwargs[key] = _apply_section(current, value, key)
        else:
            types = _field_types(RunConfig)
            kwargs[key] = _coerce(value, types[key], key)
    return replace(cfg, **kwargs)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """defaults <- TOML file (optional) <- dotted --set overrides."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "rb") as f:
            try:
                tree = tomli.load(f)
            except tomli.TOMLDecodeError as e:
                raise ConfigError(f"{path}: {e}") from e
        cfg = _apply_tree(cfg, tree)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) == 1:
            cfg = _apply_tree(cfg, {parts[0]: raw})
        elif len(parts) == 2:
            cfg = _apply_tree(cfg, {parts[0]: {parts[1]: raw}})
        else:
            raise ConfigError(f"--set key must be section.key or key, got {dotted!r}")
    return cfg


def write_echo(cfg: RunConfig, out_dir) -> Path:
    """Write the resolved config beside the artifacts it produced."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config_echo.json"
    path.write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path
