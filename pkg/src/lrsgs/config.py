"""INI-backed pipeline configuration.

One section per stage; every key optional with the documented default;
unknown sections or keys are rejected rather than ignored so a typo cannot
silently run with defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .densify import DensifyConfig
from .errors import DataError
from .features import FeatureConfig
from .losses import LossWeights
from .optim import TrainConfig


@dataclass
class LidarModelConfig:
    neighborhood_k: int = 2

    def __post_init__(self):
        if self.neighborhood_k < 1:
            raise ValueError("neighborhood_k must be at least 1")


@dataclass
class PipelineConfig:
    lidar_model: LidarModelConfig = field(default_factory=LidarModelConfig)
    feature_extraction: FeatureConfig = field(default_factory=FeatureConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.feature_extraction.validate()
        for f in dataclasses.fields(self.losses):
            if getattr(self.losses, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")
        return self


_SECTIONS = {
    "lidar_model": LidarModelConfig,
    "feature_extraction": FeatureConfig,
    "losses": LossWeights,
    "densify": DensifyConfig,
    "train": TrainConfig,
}

# the one optional-int field; everything else coerces from its default's type
_NONE_OK = {("train", "densify_end")}


def _coerce(section, name, raw, default):
    if (section, name) in _NONE_OK:
        return None if raw.strip().lower() == "none" else int(raw)
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(cp: configparser.ConfigParser) -> PipelineConfig:
    out = {}
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise DataError(f"unknown config section [{sec}]")
        cls = _SECTIONS[sec]
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in cp.items(sec):
            if key not in known:
                raise DataError(f"unknown config key {key} in [{sec}]")
            default = known[key].default
            if default is dataclasses.MISSING:
                default = known[key].default_factory()
            try:
                kwargs[key] = _coerce(sec, key, raw, default)
            except ValueError as err:
                raise DataError(f"bad value for {sec}.{key}: {raw}") from err
        try:
            out[sec] = cls(**kwargs)
        except ValueError as err:
            raise DataError(f"invalid [{sec}] config: {err}") from err
    cfg = PipelineConfig(**out)
    try:
        cfg.validate()
    except ValueError as err:
        raise DataError(str(err)) from err
    return cfg


def load_config(path) -> PipelineConfig:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise DataError(f"cannot read config file {path}")
    return parse_config(cp)


def dump_config(cfg: PipelineConfig, path) -> None:
    """Write every effective value so a run is reproducible from its dump."""
    cp = configparser.ConfigParser()
    for sec, _ in _SECTIONS.items():
        obj = getattr(cfg, sec)
        cp[sec] = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            cp[sec][f.name] = "none" if v is None else repr(v)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        cp.write(fh)


def default_config() -> PipelineConfig:
    return PipelineConfig()
