"""Run configuration: one JSON document covering the whole pipeline.

Unknown keys are rejected with their full key path, and a config written with
``to_json`` reloads to an equal RunConfig, so an archived file fully
reproduces a run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from shufa.fewshot import EpisodeSpec
from shufa.losses import LossConfig
from shufa.nets import BackboneConfig
from shufa.synthesis import SynthesisConfig
from shufa.trainer import TrainConfig


class ConfigError(ValueError):
    """Bad configuration document; message carries the offending key path."""


@dataclass
class SplitConfig:
    query_ways: int = 10
    s1_fraction: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    episodes: EpisodeSpec = field(default_factory=EpisodeSpec)
    ccnet_epochs: int = 20
    baseline_epochs: int = 20

    def __post_init__(self) -> None:
        # TrainConfig carries its own LossConfig; keep a single source of truth.
        self.train.loss = self.loss

    def validate(self) -> None:
        self.synthesis.validate()
        self.backbone.validate()
        self.loss.validate()
        self.train.validate()
        self.episodes.validate()
        if not 0.0 <= self.split.s1_fraction <= 1.0:
            raise ConfigError("split.s1_fraction must be in [0, 1]")
        if self.split.query_ways < 2:
            raise ConfigError("split.query_ways must be >= 2")


_TUPLE_FIELDS = {
    "thickness_range",
    "shear_range",
    "elastic_range",
    "ink_range",
    "stage_widths",
    "tap_stages",
    "shots",
}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config key: {path + '.' if path else ''}{key}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        ftype = known[name].type
        if dataclasses.is_dataclass(_resolve(ftype)):
            kwargs[name] = _build(_resolve(ftype), value, sub)
        elif name == "layer_weights":
            if not isinstance(value, dict):
                raise ConfigError(f"{sub}: expected an object of layer -> weight")
            try:
                kwargs[name] = {int(k): float(v) for k, v in value.items()}
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{sub}: {exc}") from exc
        elif name in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_DATACLASS_TYPES = {
    "SynthesisConfig": SynthesisConfig,
    "SplitConfig": SplitConfig,
    "BackboneConfig": BackboneConfig,
    "LossConfig": LossConfig,
    "TrainConfig": TrainConfig,
    "EpisodeSpec": EpisodeSpec,
}


def _resolve(ftype):
    if isinstance(ftype, str):
        return _DATACLASS_TYPES.get(ftype)
    return ftype


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    def convert(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: convert(getattr(value, f.name)) for f in fields(value)}
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        if isinstance(value, dict):
            return {str(k): convert(v) for k, v in value.items()}
        return value

    return convert(cfg)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    return from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
