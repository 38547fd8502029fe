"""Run configuration: nested dataclasses with strict JSON round-tripping.

Every hyperparameter the pipeline uses is surfaced here so a run config can
be dumped, versioned and replayed; unknown keys are configuration errors.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .nn.vae import VaeConfig

SEED_ENV_VAR = "VOXCITY_SEED"


@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler: str = "ddim"        # "ddim" | "ancestral"
    eta: float = 0.0
    ddim_steps: int | None = None  # None: every timestep
    hidden: int = 64
    blocks: int = 2
    share_color_models: bool = False


@dataclass
class TrainConfig:
    vae_epochs: int = 40
    vae_lr: float = 1e-3
    diffusion_steps: int = 1500
    diffusion_lr: float = 1e-3
    latent_source: str = "mean"   # "mean" | "sample": x0 fed to the denoisers
    color_mode: str = "inverse"   # "inverse" | "splat" (ablation)
    log_every: int = 1


@dataclass
class DatasetConfig:
    n_scenes: int = 3
    scene_seed: int = 0
    extent_xy: float = 24.0
    n_buildings: int = 6
    n_points: int = 12_000
    height_range: tuple = (3.0, 12.0)
    gsd: float = 1.0
    tile_px: int = 300
    contrast: float = 1.0
    ambient_amplitude: float = 0.0
    split_seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    voxel_size: float = 1.0
    vae: VaeConfig = field(default_factory=VaeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)


def to_dict(cfg) -> dict:
    if dataclasses.is_dataclass(cfg):
        return {f.name: to_dict(getattr(cfg, f.name))
                for f in dataclasses.fields(cfg)}
    if isinstance(cfg, (list, tuple)):
        return [to_dict(x) for x in cfg]
    return cfg


def from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data)}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        factory = known[name].default_factory
        if isinstance(factory, type) and dataclasses.is_dataclass(factory):
            kwargs[name] = from_dict(factory, value)
        elif isinstance(value, list) and name == "height_range":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    data = to_dict(RunConfig())
    if path is not None:
        try:
            with open(path) as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _deep_update(data, loaded)
    if overrides:
        _deep_update(data, overrides)
    return from_dict(RunConfig, data)


def _deep_update(base: dict, update: dict):
    if not isinstance(update, dict):
        raise ConfigError("config file must hold a JSON object")
    for key, value in update.items():
        if key in base and isinstance(base[key], dict) and isinstance(value, dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def env_seed(default: int = 0) -> int:
    """Global seed fallback from the environment."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc
