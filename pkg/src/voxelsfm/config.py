"""Pipeline configuration: a YAML key-value file mapping onto the module
option dataclasses, validated at load time."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .bundle import BundleOptions
from .errors import ConfigError
from .geom import Pose
from .registration import RegistrationOptions
from .voxelmap import VoxelMapConfig


@dataclass
class PipelineConfig:
    # Input artifacts.
    lidar_dir: str = ""
    lidar_times: str = ""
    tracks_file: str = ""
    cameras_file: str = ""
    output_dir: str = "out"
    gt_trajectory: str | None = None
    gt_format: str = "tum"
    scene_file: str | None = None      # enables synthetic color sampling
    extrinsics: dict = field(default_factory=dict)  # camera_id -> Pose

    # Frame subsampling (e.g. one LiDAR frame in every three).
    lidar_stride: int = 1
    visual_stride: int = 1

    seed: int = 0
    threads: int | None = None         # env VOXELSFM_THREADS overrides

    voxel: VoxelMapConfig = field(default_factory=VoxelMapConfig)
    registration: RegistrationOptions = field(default_factory=RegistrationOptions)
    ba: BundleOptions = field(default_factory=BundleOptions)
    ba_every: int = 20                 # joint BA cadence in LiDAR frames
    ba_max_points: int = 400           # per-frame LiDAR subsample inside BA

    drift_profile: str = "handheld"    # kitti | handheld
    pnp_min_matches: int = 6
    triangulation_max_error_px: float = 2.0

    fusion_ascii: bool = False
    fusion_downsample: float = 0.0

    # Test hook: compose a twist onto one registered LiDAR pose before it
    # is folded into the map, simulating accumulated drift.
    inject_jump: dict | None = None    # {"lidar_frame_index": int, "twist": [6]}

    def validate(self, base_dir="."):
        for name in ("lidar_dir", "lidar_times", "tracks_file", "cameras_file"):
            path = getattr(self, name)
            if not path:
                raise ConfigError(f"{name} is required")
            full = os.path.join(base_dir, path)
            if not os.path.exists(full):
                raise ConfigError(f"{name}: {full} does not exist")
        for name in ("gt_trajectory", "scene_file"):
            path = getattr(self, name)
            if path and not os.path.exists(os.path.join(base_dir, path)):
                raise ConfigError(f"{name}: {path} does not exist")
        if self.drift_profile not in ("kitti", "handheld"):
            raise ConfigError(f"unknown drift profile {self.drift_profile!r}")
        if self.lidar_stride < 1 or self.visual_stride < 1:
            raise ConfigError("strides must be >= 1")
        if self.ba_every < 1:
            raise ConfigError("ba_every must be >= 1")
        if not self.extrinsics:
            raise ConfigError("at least one camera extrinsic is required")
        return self

    def resolve_paths(self, base_dir):
        for name in ("lidar_dir", "lidar_times", "tracks_file", "cameras_file",
                     "output_dir", "gt_trajectory", "scene_file"):
            path = getattr(self, name)
            if path:
                setattr(self, name, os.path.normpath(os.path.join(base_dir, path)))
        return self


def _pose_to_rows(pose: Pose):
    return np.hstack([pose.rotation, pose.translation[:, None]]).reshape(-1).tolist()


def _pose_from_rows(rows):
    M = np.asarray(rows, dtype=float).reshape(3, 4)
    return Pose(M[:, :3], M[:, 3])


def config_to_dict(cfg: PipelineConfig) -> dict:
    d = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "extrinsics":
            d[f.name] = {int(k): _pose_to_rows(v) for k, v in value.items()}
        elif dataclasses.is_dataclass(value):
            d[f.name] = dataclasses.asdict(value)
        else:
            d[f.name] = value
    return d


def config_from_dict(d: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    known = {f.name: f for f in dataclasses.fields(cfg)}
    for key, value in d.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key == "extrinsics":
            cfg.extrinsics = {int(k): _pose_from_rows(v) for k, v in value.items()}
        elif key == "voxel":
            cfg.voxel = VoxelMapConfig(**value)
        elif key == "registration":
            cfg.registration = RegistrationOptions(**value)
        elif key == "ba":
            cfg.ba = BundleOptions(**value)
        else:
            setattr(cfg, key, value)
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad YAML: {exc}") from exc
    cfg = config_from_dict(data)
    env_threads = os.environ.get("VOXELSFM_THREADS")
    if env_threads:
        try:
            cfg.threads = int(env_threads)
        except ValueError as exc:
            raise ConfigError("VOXELSFM_THREADS must be an integer") from exc
    base_dir = os.path.dirname(os.path.abspath(path))
    cfg.resolve_paths(base_dir)
    cfg.validate("/")
    return cfg


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)


def dump_default_config() -> str:
    return yaml.safe_dump(config_to_dict(PipelineConfig()), sort_keys=True)
