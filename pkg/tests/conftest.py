"""Shared fixtures: a small camera, a box-on-floor scene with a voxel-aligned
acoustic map, and pipeline configs sized for fast tests."""

from pathlib import Path

import numpy as np
import pytest

from optiacoustic.acoustic_map import OccupancyGrid
from optiacoustic.config import OracleConfig, PipelineConfig, config_from_dict
from optiacoustic.geometry import PinholeCamera, look_at
from optiacoustic.keyframes import Keyframe
from optiacoustic.pointmap import Frame, OracleProvider
from optiacoustic.scale import apply_scale
from optiacoustic.scene import raycast, single_box_scene, voxelize_surface


SRC = Path(__file__).resolve().parents[1] / "src"

# Voxel centers land on the floor and on every face of the 0.2 m box.
GRID_LOWER = (-0.5125, -0.5125, -0.1125)
GRID_SIZE = (1.025, 1.025, 0.45)
GRID_RES = 0.025

EYE = (0.0, -0.7, 0.6)
TARGET = (0.0, 0.0, 0.05)


def small_config_dict(**extra) -> dict:
    data = {
        "camera": {"width": 64, "height": 48, "fx": 200.0, "fy": 200.0, "cx": 31.5, "cy": 23.5},
        "sonar": {"beam_count": 32, "bin_count": 80, "elevation_rays": 8},
        "grid": {"origin": list(GRID_LOWER), "size": list(GRID_SIZE), "resolution": GRID_RES},
        "thresholds": {"rho_feat": 0.5},
        "ransac": {"pixel_stride": 1},
        "oracle": {"fixed_scale": 2.0, "feature_noise": 0.0},
        "simulation": {"scene": "single_box", "n_frames": 4, "sweep_scans": 3},
    }
    for section, values in extra.items():
        data.setdefault(section, {}).update(values)
    return data


@pytest.fixture
def camera() -> PinholeCamera:
    return PinholeCamera(200.0, 200.0, 31.5, 23.5, 64, 48)


@pytest.fixture
def box_scene():
    return single_box_scene()


@pytest.fixture
def box_grid(box_scene) -> OccupancyGrid:
    grid = OccupancyGrid.from_bounds(GRID_LOWER, GRID_SIZE, GRID_RES)
    grid.occupancy = voxelize_surface(box_scene, grid)
    return grid


@pytest.fixture
def small_cfg() -> PipelineConfig:
    return config_from_dict(small_config_dict())


@pytest.fixture
def make_frame(box_scene, camera):
    """Frame factory rendering the box scene from a look-at pose."""

    def _make(frame_id: int, eye=EYE, target=TARGET) -> Frame:
        pose = look_at(eye, target)
        _, rgb = raycast(box_scene, camera, pose)
        return Frame(frame_id, rgb, pose, camera)

    return _make


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def oracle(box_scene) -> OracleProvider:
    """Noise-free predictor whose pointmaps come out at twice metric scale."""
    return OracleProvider(box_scene, OracleConfig(fixed_scale=2.0, feature_noise=0.0), seed=5)


@pytest.fixture
def make_keyframe(oracle, make_frame):
    """Keyframe factory with the oracle's scale already undone."""

    def _make(frame_id: int, eye=EYE, target=TARGET) -> Keyframe:
        frame = make_frame(frame_id, eye, target)
        return Keyframe.from_prediction(frame, apply_scale(oracle.predict_pair(frame, frame), 0.5))

    return _make
