"""Dataclass configs shared by every stage; serialized to TOML for reproducible runs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import tomli
import tomli_w
import torch


@dataclass
class FieldConfig:
    # main spherical grid
    n_levels: int = 8
    n_features: int = 2
    base_resolution: int = 16
    growth: float = 1.4
    log2_hash_size: int = 14
    # MLPs
    geo_features: int = 15
    density_hidden: int = 64
    color_hidden: int = 64
    color_layers: int = 2
    # proposal field
    prop_levels: int = 4
    prop_base_resolution: int = 16
    prop_growth: float = 1.4
    prop_log2_hash_size: int = 12
    prop_hidden: int = 32
    # occupancy
    occupancy_resolution: int = 16
    occupancy_threshold: float = 1e-2
    # Adam
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    adam_eps: float = 1e-15
    dtype: str = "float32"

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)


@dataclass
class RenderConfig:
    n_proposal: int = 64
    n_main: int = 32
    near: float = 0.05
    far: float = 1000.0
    resample_floor: float = 1e-2
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lambda_dist: float = 0.002
    lambda_prop: float = 1.0
    lambda_depth: float = 0.5
    rgb_only: bool = False
    chunk: int = 8192


@dataclass
class AtlasConfig:
    d_th: float = 0.3
    max_models: int = 12
    models_per_step: int = 3
    rays_per_batch: int = 1024
    propagate: bool = True
    blend_power: float = 4.0
    blend_top_k: int = 3
    seed: int = 0


@dataclass
class RunConfig:
    mode: str = "view_centric"  # or "world_centric_single"
    rgb_only: bool = False
    seed: int = 0
    stream: str = ""
    out: str = "runs/default"
    n_train: int = 30
    eval_interval: int = 10
    rescale: bool = True
    save_renders: bool = False
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    render: RenderConfig = dataclasses.field(default_factory=RenderConfig)
    atlas: AtlasConfig = dataclasses.field(default_factory=AtlasConfig)

    def validate(self) -> None:
        if self.mode not in ("view_centric", "world_centric_single"):
            raise ValueError(f"unknown mode {self.mode!r}")
        r = self.render
        if min(r.lambda_dist, r.lambda_prop, r.lambda_depth) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.n_train < 0 or self.eval_interval < 1:
            raise ValueError("n_train must be >= 0 and eval_interval >= 1")


def to_dict(cfg) -> dict[str, Any]:
    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, tuple):
            return list(v)
        return v

    return clean(dataclasses.asdict(cfg))


def _from_dict(cls, data: dict[str, Any]):
    kwargs = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown config key {cls.__name__}.{key}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            value = _from_dict(type(default), value)
        elif isinstance(default, tuple):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def field_config_from_dict(data: dict[str, Any]) -> FieldConfig:
    return _from_dict(FieldConfig, data)


def run_config_from_dict(data: dict[str, Any]) -> RunConfig:
    return _from_dict(RunConfig, data)


def load_config(path: str | Path) -> RunConfig:
    with open(path, "rb") as f:
        return run_config_from_dict(tomli.load(f))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "wb") as f:
        tomli_w.dump(to_dict(cfg), f)
