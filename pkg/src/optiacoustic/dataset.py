"""Synthetic dataset generation, dataset loading and validation, image codecs
and PLY point cloud output.

Dataset layout:
    frames/NNNNNN.png   camera frames (or .rgb raw files)
    poses.txt           world-from-camera pose per frame
    sonar/NNNNNN.bin    sonar scans with their poses
    scene.json          ground-truth scene
    config              pipeline config used to generate the dataset
    manifest.json       DatasetManifest
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import cv2
import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError
from pydantic import BaseModel, Field, ValidationError

from .acoustic_map import SonarScan, read_scan, write_scan
from .config import STREAM_SIMULATION, PipelineConfig, derive_seed, dump_config, load_config
from .errors import DatasetError, FormatError
from .geometry import PinholeCamera, RigidTransform, read_poses, write_poses
from .pointmap import Frame
from .scene import (
    Scene,
    SonarGeometry,
    TrajectoryKind,
    TrajectoryParams,
    TurbidityModel,
    apply_haze,
    gen_trajectory,
    make_scene,
    raycast,
    simulate_sonar,
)


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
RAW_MAGIC = b"OARG"
_RAW_HEADER = struct.Struct("<4sII")
IMAGE_NOISE_DN = 2.0


class DatasetManifest(BaseModel):
    frame_count: int = Field(..., ge=0)
    width: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    fx: float
    fy: float
    cx: float
    cy: float
    scan_count: int = Field(..., ge=0)
    beam_count: int
    bin_count: int
    h_fov_deg: float
    v_fov_deg: float
    max_range: float
    ntu: float = 0.0
    seed: int = 0
    scene: Optional[str] = None
    image_format: str = "png"
    frame_files: List[str] = Field(default_factory=list)
    scan_files: List[str] = Field(default_factory=list)

    def camera(self) -> PinholeCamera:
        return PinholeCamera(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


def write_image(path: PathLike, rgb: np.ndarray) -> None:
    """PNG via OpenCV, or the raw fallback (`.rgb`: header + H*W*3 bytes)."""
    path = Path(path)
    if path.suffix == ".rgb":
        h, w = rgb.shape[:2]
        path.write_bytes(_RAW_HEADER.pack(RAW_MAGIC, h, w) + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
        return
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write image {path}")


def read_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".rgb":
        raw = path.read_bytes()
        if len(raw) < _RAW_HEADER.size:
            raise FormatError(f"{path}: truncated raw image header")
        magic, h, w = _RAW_HEADER.unpack_from(raw)
        if magic != RAW_MAGIC or len(raw) != _RAW_HEADER.size + h * w * 3:
            raise FormatError(f"{path}: malformed raw image")
        return np.frombuffer(raw, dtype=np.uint8, offset=_RAW_HEADER.size).reshape(h, w, 3).copy()
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FormatError(f"{path}: unreadable image")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def to_working_size(rgb: np.ndarray, cam: PinholeCamera) -> np.ndarray:
    if rgb.shape[:2] == cam.shape:
        return rgb
    return cv2.resize(rgb, (cam.width, cam.height), interpolation=cv2.INTER_AREA)


def write_ply(path: PathLike, points: np.ndarray, colors: np.ndarray) -> None:
    """Binary little-endian PLY with float32 x, y, z and uint8 red, green, blue."""
    vertices = np.empty(len(points), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                             ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    if len(points):
        vertices["x"], vertices["y"], vertices["z"] = np.asarray(points, dtype=np.float32).T
        vertices["red"], vertices["green"], vertices["blue"] = np.asarray(colors, dtype=np.uint8).T
    PlyData([PlyElement.describe(vertices, "vertex")], text=False, byte_order="<").write(str(path))


def read_ply(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    try:
        vertex = PlyData.read(str(path))["vertex"]
    except (KeyError, ValueError, PlyParseError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    points = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)
    names = vertex.data.dtype.names
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([vertex["red"], vertex["green"], vertex["blue"]], axis=1).astype(np.uint8)
    else:
        colors = np.zeros((len(points), 3), dtype=np.uint8)
    return points.reshape(-1, 3), colors.reshape(-1, 3)


def trajectory_params(cfg: PipelineConfig) -> TrajectoryParams:
    sim = cfg.simulation
    return TrajectoryParams(
        sweep_radius=sim.sweep_radius,
        sweep_height=sim.sweep_height,
        wrist_tilt_deg=sim.wrist_tilt_deg,
        min_standoff=sim.min_standoff,
    )


def sonar_geometry(cfg: PipelineConfig) -> SonarGeometry:
    s = cfg.sonar
    return SonarGeometry(s.beam_count, s.bin_count, s.h_fov, s.v_fov, s.max_range, s.gain, s.elevation_rays)


def simulate_dataset(cfg: PipelineConfig, out_dir: PathLike, scene: Optional[Scene] = None) -> DatasetManifest:
    """Write a complete synthetic dataset: object-centric frames plus sweep sonar scans."""
    out = Path(out_dir)
    scene_name = cfg.simulation.scene if scene is None else None
    scene = scene if scene is not None else make_scene(cfg.simulation.scene)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "sonar").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_SIMULATION))
    cam = cfg.camera.native()
    turbidity = TurbidityModel(cfg.turbidity.ntu, cfg.turbidity.beta)
    params = trajectory_params(cfg)

    frame_poses = gen_trajectory(TrajectoryKind.OBJECT_CENTRIC, scene, cfg.simulation.n_frames, params)
    ext = "png" if cfg.simulation.image_format == "png" else "rgb"
    frame_files = []
    for i, pose in enumerate(frame_poses):
        depth, rgb = raycast(scene, cam, pose)
        if cfg.simulation.haze:
            rgb = apply_haze(rgb, depth, turbidity)
        noisy = rgb.astype(np.float64) + rng.normal(0.0, IMAGE_NOISE_DN, rgb.shape)
        name = f"frames/{i:06d}.{ext}"
        write_image(out / name, np.clip(np.round(noisy), 0, 255).astype(np.uint8))
        frame_files.append(name)
    write_poses(out / "poses.txt", dict(enumerate(frame_poses)))

    geom = sonar_geometry(cfg)
    scan_files = []
    for i, pose in enumerate(gen_trajectory(TrajectoryKind.SWEEP, scene, cfg.simulation.sweep_scans, params)):
        name = f"sonar/{i:06d}.bin"
        write_scan(out / name, simulate_sonar(scene, pose, geom))
        scan_files.append(name)

    (out / "scene.json").write_text(json.dumps({"preset": scene_name, **scene.to_dict()}, indent=2, sort_keys=True))
    dump_config(cfg, out / "config")
    s = cfg.sonar
    manifest = DatasetManifest(
        frame_count=len(frame_files),
        width=cam.width,
        height=cam.height,
        fx=cam.fx,
        fy=cam.fy,
        cx=cam.cx,
        cy=cam.cy,
        scan_count=len(scan_files),
        beam_count=s.beam_count,
        bin_count=s.bin_count,
        h_fov_deg=s.h_fov_deg,
        v_fov_deg=s.v_fov_deg,
        max_range=s.max_range,
        ntu=cfg.turbidity.ntu,
        seed=cfg.seed,
        scene=scene_name,
        image_format=cfg.simulation.image_format,
        frame_files=frame_files,
        scan_files=scan_files,
    )
    (out / "manifest.json").write_text(json.dumps(manifest.dict(), indent=2, sort_keys=True))
    logger.info("simulated %d frames and %d scans into %s", len(frame_files), len(scan_files), out)
    return manifest


@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    config: PipelineConfig
    poses: Dict[int, RigidTransform]
    scene: Optional[Scene] = None

    def frame_paths(self) -> List[Path]:
        return [self.root / f for f in self.manifest.frame_files]

    def scan_paths(self) -> List[Path]:
        return [self.root / f for f in self.manifest.scan_files]

    def scans(self) -> Iterator[SonarScan]:
        for p in self.scan_paths():
            yield read_scan(p)

    def frames(self, cfg: Optional[PipelineConfig] = None) -> Iterator[Frame]:
        """Frames at the predictor's working resolution, in order."""
        cam = (cfg or self.config).camera.working()
        for i, p in enumerate(self.frame_paths()):
            yield Frame(i, to_working_size(read_image(p), cam), self.poses[i], cam, p)


def load_dataset(path: PathLike) -> Dataset:
    root = Path(path)
    try:
        manifest = DatasetManifest.parse_raw((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{root}: no manifest.json") from exc
    except ValidationError as exc:
        raise DatasetError(f"{root}: invalid manifest: {exc}") from exc
    config = load_config(root / "config") if (root / "config").exists() else PipelineConfig()
    poses = read_poses(root / "poses.txt") if (root / "poses.txt").exists() else {}
    scene = None
    if (root / "scene.json").exists():
        scene = Scene.from_dict(json.loads((root / "scene.json").read_text()))
    return Dataset(root, manifest, config, poses, scene)


def validate_dataset(path: PathLike) -> Dataset:
    """Load a dataset and check it against its manifest; raises DatasetError on any mismatch."""
    ds = load_dataset(path)
    m = ds.manifest
    if len(m.frame_files) != m.frame_count or len(m.scan_files) != m.scan_count:
        raise DatasetError(f"{ds.root}: manifest counts disagree with its file lists")
    missing = [str(p) for p in ds.frame_paths() + ds.scan_paths() if not p.exists()]
    if missing:
        raise DatasetError(f"{ds.root}: {len(missing)} missing files, first {missing[0]}")
    if sorted(ds.poses) != list(range(m.frame_count)):
        raise DatasetError(f"{ds.root}: poses.txt has {len(ds.poses)} poses for {m.frame_count} frames")
    for p in ds.frame_paths():
        shape = read_image(p).shape[:2]
        if shape != (m.height, m.width):
            raise DatasetError(f"{p}: image {shape[1]}x{shape[0]} does not match intrinsics {m.width}x{m.height}")
    cam = ds.config.camera
    if (cam.width, cam.height) != (m.width, m.height):
        raise DatasetError(f"{ds.root}: config camera {cam.width}x{cam.height} disagrees with manifest")
    return ds
