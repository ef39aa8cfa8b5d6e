"""Run configuration and the energy accounting model.

One YAML file drives everything: scenario generation, model sizes, loss
weights, stage schedules, and seeds. Any subset of keys may be given; the
rest keep their defaults, so a config file only needs to state what it
changes.
"""

import dataclasses
import os
import pathlib

import numpy as np
import yaml

from ..losses import LossWeights
from ..maskgen import DEFAULT_LEVELS
from ..rangeimage import BeamGrid, default_grid
from ..scenesim import GenerationConfig
from ..voxelizer import VoxelGridConfig


@dataclasses.dataclass(frozen=True)
class EnergyModel:
    name: str
    e_full: float      # joules per full scan

    def __post_init__(self):
        if self.e_full <= 0:
            raise ValueError("e_full must be positive")


ENERGY_MODELS = {
    "hdl32e": EnergyModel("hdl32e", 0.6),
    "hdl64e": EnergyModel("hdl64e", 6.0),
}


def energy_report(sparsity_series, model):
    """Joules per scan, per sequence, and percent saved.

    Energy scales with the fraction of beams actually fired, so the input
    is pattern sparsity (disabled-beam fraction), not empty-pixel sparsity.
    `model` is an EnergyModel or the name of a registered one.
    """
    if isinstance(model, str):
        if model not in ENERGY_MODELS:
            raise ValueError(f"unknown energy model: {model}")
        model = ENERGY_MODELS[model]
    s = np.atleast_1d(np.asarray(sparsity_series, dtype=np.float64))
    if s.size == 0:
        raise ValueError("empty sparsity series")
    if s.min() < 0.0 or s.max() > 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    per_scan = model.e_full * (1.0 - s)
    return {
        "model": model.name,
        "joules_per_scan": per_scan,
        "joules_sequence": float(per_scan.sum()),
        "percent_saved": float(s.mean() * 100.0),
    }


@dataclasses.dataclass
class RunConfig:
    # scenario
    n_frames: int = 12
    frame_interval: float = 0.2
    actor_count_range: tuple = (2, 6)
    ego_trajectory: str = "straight"
    ego_speed: float = 2.0
    ego_yaw_rate: float = 0.1
    spawn_extent: float = 26.0
    sensor_height: float = 1.8
    max_range: float = 120.0
    range_noise_sigma: float = 0.0
    churn: float = 0.0
    grid: BeamGrid = dataclasses.field(default_factory=default_grid)

    # model
    dim: int = 32
    n_layers: int = 2
    n_queries: int = 16
    n_classes: int = 3
    ffn_hidden: int = 64
    mask_head_hidden: int = 8
    bev_extent: float = 40.0
    bev_cells: int = 32
    z_min: float = -2.5
    z_max: float = 2.5
    voxel_k: int = 8
    voxel_alpha: float = 0.1
    match_class_weight: float = 1.0

    # temporal buffer
    buffer_depth: int = 4
    mtm_gamma: float = 2.0
    mtm_score_floor: float = 0.05

    # camera stand-in
    camera_jitter: float = 0.5

    # losses and mask sampling
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    beta: float = 0.25
    gamma_f: float = 2.0
    alpha_f: float = 0.25
    tau_start: float = 1.0
    tau_end: float = 0.3
    levels: tuple = DEFAULT_LEVELS

    # schedules
    pretrain_steps: int = 25000
    pretrain_lr: float = 4e-3
    pretrain_aux_weight: float = 2.0
    stage1_steps: int = 3000
    stage1_lr: float = 4e-3
    stage2_steps: int = 1500
    stage2_lr: float = 2e-3
    stage3_steps: int = 1000
    stage3_lr: float = 1e-3

    # data sizes and seeds
    n_train_sequences: int = 200
    n_eval_sequences: int = 20
    data_seed: int = 100
    train_seed: int = 200
    eval_seed: int = 300

    # reporting
    energy_model: str = "hdl32e"
    threads: int = 1

    def __post_init__(self):
        if self.buffer_depth < 2:
            raise ValueError("buffer_depth must be at least 2")
        if self.energy_model not in ENERGY_MODELS:
            raise ValueError(f"unknown energy model {self.energy_model!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        self.loss_weights()          # validates lambdas, beta, focal params

    def scenario_config(self, **overrides):
        kwargs = dict(
            n_frames=self.n_frames, frame_interval=self.frame_interval,
            actor_count_range=tuple(self.actor_count_range),
            ego_trajectory=self.ego_trajectory, ego_speed=self.ego_speed,
            ego_yaw_rate=self.ego_yaw_rate, spawn_extent=self.spawn_extent,
            sensor_height=self.sensor_height, max_range=self.max_range,
            range_noise_sigma=self.range_noise_sigma, churn=self.churn,
            grid=self.grid)
        kwargs.update(overrides)
        cfg = GenerationConfig(**kwargs)
        cfg.validate()
        return cfg

    def voxel_config(self):
        size = 2.0 * self.bev_extent / self.bev_cells
        return VoxelGridConfig(
            extent_min=(-self.bev_extent, -self.bev_extent, self.z_min),
            extent_max=(self.bev_extent, self.bev_extent, self.z_max),
            voxel_size=size, K_v=self.voxel_k, D_p=3)

    def loss_weights(self):
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2,
                           lambda3=self.lambda3, beta=self.beta,
                           gamma_f=self.gamma_f, alpha_f=self.alpha_f)

    def energy(self):
        return ENERGY_MODELS[self.energy_model]

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["grid"] = self.grid.to_dict()
        out["actor_count_range"] = list(self.actor_count_range)
        out["levels"] = list(self.levels)
        return _plain(out)


def _plain(value):
    """Recursively strip numpy scalar types so YAML can represent the dict."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def load_config(path=None, overrides=None):
    """Build a RunConfig from a YAML file plus CLI overrides.

    Unknown keys are rejected so typos do not silently fall back to
    defaults. Values that name filesystem paths must exist.
    """
    data = {}
    if path is not None:
        path = pathlib.Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text())
        if loaded:
            data.update(loaded)
    if overrides:
        data.update(overrides)

    grid = data.pop("grid", None)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, value in data.items():
        if isinstance(value, str) and ("/" in value or value.endswith(".bin")):
            if not pathlib.Path(value).exists():
                raise FileNotFoundError(f"config key {key} references missing path {value}")
    if "actor_count_range" in data:
        data["actor_count_range"] = tuple(data["actor_count_range"])
    if "levels" in data:
        data["levels"] = tuple(data["levels"])
    cfg = RunConfig(**data)
    if grid is not None:
        cfg.grid = BeamGrid.from_dict(grid)
    return cfg


def save_config(path, cfg):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path


def output_root(cli_value=None):
    """Resolve the output directory: flag beats environment beats ./runs."""
    root = cli_value or os.environ.get("ADAPTIVESCAN_OUT") or "runs"
    return pathlib.Path(root)
