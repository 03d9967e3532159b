# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Run configuration: one JSON document with `data` and `train` sections."""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

from synthdata import DEFAULT_BLOB_WIDTH, DEFAULT_NOISE_SD, DEFAULT_SHAPE_2D, DEFAULT_SHAPE_3D, DEFAULT_TRAIN_FRACTION
from training import TrainConfig
from utils import write_json

logger = logging.getLogger(__name__)

SECTIONS = ('data', 'train')


class ConfigError(ValueError):
    """Unparsable config, unknown keys or invalid values."""


@dataclass
class DataConfig:
    """Synthetic dataset parameters."""

    dims: int = 2
    n_per_group: int = 512
    shape: Optional[List[int]] = None
    noise_sd: float = DEFAULT_NOISE_SD
    blob_width: float = DEFAULT_BLOB_WIDTH
    train_fraction: float = DEFAULT_TRAIN_FRACTION
    seed: int = 0

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"Invalid dims {self.dims}. Must be one of: (2, 3)")
        if self.shape is None:
            self.shape = list(DEFAULT_SHAPE_2D if self.dims == 2 else DEFAULT_SHAPE_3D)
        self.shape = [int(s) for s in self.shape]
        if len(self.shape) != self.dims:
            raise ValueError(f"shape {self.shape} does not have {self.dims} axes")
        if self.n_per_group < 2:
            raise ValueError(f"n_per_group must be >= 2, got {self.n_per_group}")
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass
class RunConfig:
    """Full configuration of one run."""

    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {'data': asdict(self.data), 'train': asdict(self.train)}

    def with_seed(self, seed: Optional[int]) -> 'RunConfig':
        """Copy with both section seeds replaced (no-op for None)."""
        if seed is None:
            return self
        payload = self.to_dict()
        payload['data']['seed'] = seed
        payload['train']['seed'] = seed
        return config_from_dict(payload)

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        write_json(path, self.to_dict())
        return path


def _build_section(name: str, cls, payload) -> object:
    if not isinstance(payload, dict):
        raise ConfigError(f"Section '{name}' must be an object, got {type(payload).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in '{name}': {unknown}. Must be among: {sorted(known)}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{name}' section: {e}") from e


def config_from_dict(payload: dict) -> RunConfig:
    """
    Build a RunConfig, rejecting unknown keys at every level.

    Args:
        payload: Parsed JSON document

    Returns:
        RunConfig with defaults for missing keys
    """
    if not isinstance(payload, dict):
        raise ConfigError("Config must be a JSON object")
    unknown = sorted(set(payload) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown top-level keys: {unknown}. Must be among: {list(SECTIONS)}")
    return RunConfig(
        data=_build_section('data', DataConfig, payload.get('data', {})),
        train=_build_section('train', TrainConfig, payload.get('train', {})),
    )


def load_config(path: Optional[Path | str] = None, seed: Optional[int] = None) -> RunConfig:
    """
    Load a run config file (defaults when path is None).

    Args:
        path: JSON config file
        seed: Optional override for both section seeds

    Returns:
        RunConfig
    """
    if path is None:
        return RunConfig().with_seed(seed)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'r') as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {e}") from e
    logger.info(f"Loaded config {path}")
    return config_from_dict(payload).with_seed(seed)


def example_config(dims: int = 2) -> RunConfig:
    """Default synthetic setting; 3D switches to the warp-field simulator."""
    train = TrainConfig(mode='warp-field') if dims == 3 else TrainConfig()
    return RunConfig(data=DataConfig(dims=dims), train=train)
