"""Pipeline configuration models and the key-value config file format.

The file holds one `section.key = value` assignment per line. `#` starts a
comment. Values are JSON literals (numbers, lists, true/false, null) or bare
strings. Top-level keys (`seed`, `realtime`, `full_optimize`) have no section.
"""

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, root_validator, validator

from .errors import ConfigError
from .geometry import PinholeCamera, fit_to_max_dim, rescale_camera
from .scene import SCENES


class _Section(BaseModel):
    class Config:
        extra = "forbid"
        validate_assignment = True


class CameraConfig(_Section):
    """Native sensor intrinsics; frames are downscaled to `max_dim` before prediction."""
    width: int = Field(640, ge=1)
    height: int = Field(480, ge=1)
    fx: float = Field(500.0, gt=0)
    fy: float = Field(500.0, gt=0)
    cx: float = 319.5
    cy: float = 239.5
    max_dim: int = Field(512, ge=8)

    def native(self) -> PinholeCamera:
        return PinholeCamera(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def working(self) -> PinholeCamera:
        """Intrinsics at the predictor's input size."""
        w, h = fit_to_max_dim(self.width, self.height, self.max_dim)
        cam = self.native()
        return cam if (w, h) == (cam.width, cam.height) else rescale_camera(cam, w, h)


class SonarConfig(_Section):
    beam_count: int = Field(128, ge=1)
    bin_count: int = Field(200, ge=1)
    h_fov_deg: float = Field(130.0, gt=0, le=180)
    v_fov_deg: float = Field(20.0, gt=0, le=180)
    max_range: float = Field(2.0, gt=0)
    gain: float = Field(10.0, gt=0)
    elevation_rays: int = Field(32, ge=1)
    intensity_threshold: float = Field(0.5, ge=0)
    workers: int = Field(1, ge=1)

    @property
    def h_fov(self) -> float:
        return math.radians(self.h_fov_deg)

    @property
    def v_fov(self) -> float:
        return math.radians(self.v_fov_deg)


class GridConfig(_Section):
    origin: Tuple[float, float, float] = (-1.0, -1.0, -0.175)
    size: Tuple[float, float, float] = (2.0, 2.0, 0.8)
    resolution: float = Field(0.05, gt=0)
    k_hit: int = Field(3, ge=1)
    r_occ: float = Field(0.3, ge=0, le=1)

    @validator("size")
    def _positive_size(cls, v):
        if min(v) <= 0:
            raise ValueError(f"grid size must be positive, got {v}")
        return v


class RansacConfig(_Section):
    iterations: int = Field(200, ge=1)
    epsilon_in: float = Field(0.075, gt=0)
    min_inlier_fraction: float = Field(0.15, ge=0, le=1)
    pixel_stride: int = Field(4, ge=1)
    seed: Optional[int] = None


class ThresholdConfig(_Section):
    """Keyframe, matching, recovery and initialization thresholds."""
    tau_k: float = Field(0.3, ge=0, le=1)
    tau_f: float = Field(0.05, ge=0, le=1)
    tau_c: float = Field(1.5, ge=0)
    tau_q: float = Field(0.5, ge=0, le=1)
    tau_r: float = Field(0.05, ge=0, le=1)
    tau_i: float = Field(2.0, ge=0)
    delta_depth: float = Field(0.075, gt=0)
    rho_feat: float = Field(0.7, ge=-1, le=1)

    @root_validator(skip_on_failure=True)
    def _recovery_below_keyframe(cls, values):
        if not values["tau_r"] < values["tau_k"]:
            raise ValueError(f"tau_r ({values['tau_r']}) must be smaller than tau_k ({values['tau_k']})")
        return values


class OptimizerConfig(_Section):
    w_prior: float = Field(10.0, ge=0)
    w_scale: float = Field(1.0, ge=0)
    max_iters: int = Field(20, ge=1)
    max_points_per_edge: int = Field(2000, ge=3)
    tolerance: float = Field(1e-10, gt=0)


class OracleConfig(_Section):
    """Synthetic stand-in for the two-view predictor."""
    noise_sigma: float = Field(0.0, ge=0)
    outlier_fraction: float = Field(0.0, ge=0, le=1)
    scale_min: float = Field(0.25, gt=0)
    scale_max: float = Field(4.0, gt=0)
    fixed_scale: Optional[float] = Field(None, gt=0)
    conf_max: float = Field(10.0, gt=0)
    conf_decay: float = Field(0.3, ge=0)
    feature_dim: int = Field(16, ge=1)
    feature_noise: float = Field(0.05, ge=0)

    @root_validator(skip_on_failure=True)
    def _scale_range(cls, values):
        if not values["scale_min"] < values["scale_max"]:
            raise ValueError(f"scale_min ({values['scale_min']}) must be below scale_max ({values['scale_max']})")
        return values


class TurbidityConfig(_Section):
    ntu: float = Field(0.0, ge=0)
    beta: float = Field(0.25, ge=0)


class SimulationConfig(_Section):
    scene: str = "default"
    n_frames: int = Field(100, ge=1)
    sweep_scans: int = Field(60, ge=1)
    image_format: str = "png"
    haze: bool = True
    sweep_radius: float = Field(1.0, gt=0)
    sweep_height: float = Field(0.9, gt=0)
    wrist_tilt_deg: float = Field(40.0, ge=0)
    min_standoff: float = Field(0.5, ge=0)

    @validator("scene")
    def _known_scene(cls, v):
        if v not in SCENES:
            raise ValueError(f"unknown scene preset {v!r}; choose from {sorted(SCENES)}")
        return v

    @validator("image_format")
    def _known_format(cls, v):
        if v not in ("png", "raw"):
            raise ValueError(f"image_format must be 'png' or 'raw', got {v!r}")
        return v


class ProviderConfig(_Section):
    kind: str = "oracle"
    command: Optional[List[str]] = None
    timeout: float = Field(30.0, gt=0)

    @root_validator(skip_on_failure=True)
    def _command_for_external(cls, values):
        if values["kind"] not in ("oracle", "external"):
            raise ValueError(f"provider kind must be 'oracle' or 'external', got {values['kind']!r}")
        if values["kind"] == "external" and not values.get("command"):
            raise ValueError("external provider needs provider.command")
        return values


class PipelineConfig(_Section):
    camera: CameraConfig = Field(default_factory=CameraConfig)
    sonar: SonarConfig = Field(default_factory=SonarConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    ransac: RansacConfig = Field(default_factory=RansacConfig)
    thresholds: ThresholdConfig = Field(default_factory=ThresholdConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    turbidity: TurbidityConfig = Field(default_factory=TurbidityConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    provider: ProviderConfig = Field(default_factory=ProviderConfig)
    seed: int = Field(0, ge=0)
    realtime: bool = False
    frame_rate: float = Field(3.0, gt=0)
    full_optimize: bool = False


# Stream identifiers mixed into the master seed.
STREAM_SIMULATION = 1
STREAM_ORACLE = 2
STREAM_RANSAC = 3


def derive_seed(seed: int, *keys: int) -> int:
    """A 32-bit seed for an independent stream derived from `seed` and `keys`."""
    return int(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(1)[0])


def ransac_rng(cfg: PipelineConfig, frame_id: int) -> np.random.Generator:
    base = cfg.ransac.seed if cfg.ransac.seed is not None else derive_seed(cfg.seed, STREAM_RANSAC)
    return np.random.default_rng(np.random.SeedSequence([base, int(frame_id)]))


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str, source: str = "<config>") -> PipelineConfig:
    data: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        parts = key.split(".")
        if len(parts) > 2 or not all(parts):
            raise ConfigError(f"{source}:{lineno}: bad key {key!r}")
        if len(parts) == 1:
            data[key] = _parse_value(raw)
        else:
            data.setdefault(parts[0], {})[parts[1]] = _parse_value(raw)
    return config_from_dict(data, source)


def config_from_dict(data: Dict[str, Any], source: str = "<config>") -> PipelineConfig:
    try:
        return PipelineConfig.parse_obj(data)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """Load a config file, or the defaults when `path` is None."""
    if path is None:
        return PipelineConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config_text(text, str(p))


def config_lines(cfg: PipelineConfig) -> List[str]:
    lines = []
    for key, value in sorted(cfg.dict().items()):
        if isinstance(value, dict):
            for sub, v in sorted(value.items()):
                lines.append(f"{key}.{sub} = {json.dumps(v)}")
        else:
            lines.append(f"{key} = {json.dumps(value)}")
    return lines


def dump_config(cfg: PipelineConfig, path: Union[str, Path]) -> None:
    Path(path).write_text("\n".join(config_lines(cfg)) + "\n")


def with_overrides(cfg: PipelineConfig, **sections: Dict[str, Any]) -> PipelineConfig:
    """Copy of `cfg` with per-section field overrides, validated."""
    data = cfg.dict()
    for name, values in sections.items():
        if isinstance(values, dict):
            data.setdefault(name, {}).update(values)
        else:
            data[name] = values
    return config_from_dict(data)
