"""Synthetic ground truth: primitive scenes, ray casting, sonar simulation,
turbidity attenuation and sensor trajectories.

World frame: z up, the floor is the plane z = floor_height.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .acoustic_map import OccupancyGrid, SonarScan, beam_azimuths, range_to_bin, sonar_directions
from .depth import DepthImage
from .geometry import PinholeCamera, RigidTransform, look_at


logger = logging.getLogger(__name__)

EPS = 1e-9
SEDIMENT_RGB = (146, 134, 104)
WATER_RGB = (112, 128, 118)


@dataclass(frozen=True, eq=False)
class SceneObject:
    """A box, cylinder or sphere placed in the world.

    `size` is (lx, ly, lz) for a box, (diameter, height) for a cylinder whose
    axis is the local z axis, and (diameter,) for a sphere. `pose` maps the
    object's local frame (centered on the object) to the world.
    """
    name: str
    kind: str
    pose: RigidTransform
    size: Tuple[float, ...]
    color: Tuple[int, int, int] = (200, 200, 200)

    def __post_init__(self) -> None:
        expected = {"box": 3, "cylinder": 2, "sphere": 1}
        if self.kind not in expected:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if len(self.size) != expected[self.kind] or min(self.size) <= 0:
            raise ValueError(f"{self.kind} {self.name!r} needs {expected[self.kind]} positive dimensions, got {self.size}")

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def half_extents(self) -> np.ndarray:
        """Half sizes of the object's local bounding box."""
        if self.kind == "box":
            return np.asarray(self.size) / 2
        if self.kind == "cylinder":
            d, h = self.size
            return np.array([d / 2, d / 2, h / 2])
        return np.full(3, self.size[0] / 2)

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half_extents()))

    def ground_truth_size(self) -> float:
        """Largest dimension, the quantity reported by object measurement."""
        return float(max(self.size))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Nearest positive ray parameter per ray (unit dirs), NaN on a miss."""
        inv = self.pose.inverse()
        o = inv.apply(origins)
        d = dirs @ inv.rotation.T
        if self.kind == "sphere":
            return _ray_sphere(o, d, self.size[0] / 2)
        if self.kind == "box":
            return _ray_box(o, d, self.half_extents())
        return _ray_cylinder(o, d, self.size[0] / 2, self.size[1] / 2)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        p = self.pose.inverse().apply(points)
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.size[0] / 2
        if self.kind == "box":
            q = np.abs(p) - self.half_extents()
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(q.max(axis=-1), 0.0)
        r, h = self.size[0] / 2, self.size[1] / 2
        q = np.stack([np.linalg.norm(p[..., :2], axis=-1) - r, np.abs(p[..., 2]) - h], axis=-1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "center": [float(v) for v in self.pose.translation],
            "quaternion": [float(v) for v in self.pose.quaternion()],
            "size": [float(v) for v in self.size],
            "color": [int(c) for c in self.color],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneObject":
        pose = RigidTransform.from_quaternion(data.get("quaternion", [0, 0, 0, 1]), data["center"])
        return cls(data["name"], data["kind"], pose, tuple(data["size"]), tuple(data.get("color", (200, 200, 200))))


def _first_positive(*candidates: np.ndarray) -> np.ndarray:
    stacked = np.stack(candidates, axis=0)
    stacked = np.where(stacked > EPS, stacked, np.inf)
    best = stacked.min(axis=0)
    return np.where(np.isfinite(best), best, np.nan)


def _ray_sphere(o: np.ndarray, d: np.ndarray, radius: float) -> np.ndarray:
    b = np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - radius * radius
    disc = b * b - c
    root = np.sqrt(np.where(disc >= 0, disc, np.nan))
    return _first_positive(-b - root, -b + root)


def _ray_box(o: np.ndarray, d: np.ndarray, half: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    flat = d == 0
    inside = np.abs(o) <= half
    tmin = np.where(flat, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(flat, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    hit = t_near <= t_far
    return _first_positive(np.where(hit, t_near, np.nan), np.where(hit, t_far, np.nan))


def _ray_cylinder(o: np.ndarray, d: np.ndarray, radius: float, half_h: float) -> np.ndarray:
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - radius * radius
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - a * c
        root = np.sqrt(np.where((disc >= 0) & (a > 0), disc, np.nan))
        side = [(-b - root) / a, (-b + root) / a]
        caps = [(half_h - o[:, 2]) / d[:, 2], (-half_h - o[:, 2]) / d[:, 2]]
    cands = []
    for t in side:
        z = o[:, 2] + t * d[:, 2]
        cands.append(np.where(np.abs(z) <= half_h, t, np.nan))
    for t in caps:
        x = o[:, 0] + t * d[:, 0]
        y = o[:, 1] + t * d[:, 1]
        cands.append(np.where(x * x + y * y <= radius * radius, t, np.nan))
    return _first_positive(*cands)


@dataclass
class Scene:
    """Primitive objects on an optional floor plane."""
    objects: List[SceneObject] = field(default_factory=list)
    floor_height: Optional[float] = 0.0
    floor_color: Tuple[int, int, int] = SEDIMENT_RGB

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest hit distance and hit id per ray (-1 floor, -2 none, else object index)."""
        n = dirs.shape[0]
        best = np.full(n, np.inf)
        which = np.full(n, -2, dtype=np.int64)
        origins = np.broadcast_to(origins, dirs.shape)
        if self.floor_height is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (self.floor_height - origins[:, 2]) / dirs[:, 2]
            t = np.where((t > EPS) & np.isfinite(t), t, np.inf)
            closer = t < best
            best[closer], which[closer] = t[closer], -1
        for i, obj in enumerate(self.objects):
            t = obj.intersect(origins, dirs)
            t = np.where(np.isnan(t), np.inf, t)
            closer = t < best
            best[closer], which[closer] = t[closer], i
        best[which == -2] = np.nan
        return best, which

    def colors_for(self, which: np.ndarray) -> np.ndarray:
        palette = np.array([o.color for o in self.objects] + [self.floor_color, (0, 0, 0)], dtype=np.uint8)
        lookup = np.where(which >= 0, which, np.where(which == -1, len(self.objects), len(self.objects) + 1))
        return palette[lookup]

    def center(self) -> np.ndarray:
        if not self.objects:
            return np.array([0.0, 0.0, self.floor_height or 0.0])
        c = np.mean([o.center for o in self.objects], axis=0)
        c[2] = self.floor_height if self.floor_height is not None else c[2]
        return c

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        dist = np.full(points.shape[:-1], np.inf)
        if self.floor_height is not None:
            dist = np.abs(points[..., 2] - self.floor_height)
        for obj in self.objects:
            dist = np.minimum(dist, np.abs(obj.signed_distance(points)))
        return dist

    def object(self, name: str) -> SceneObject:
        for obj in self.objects:
            if obj.name == name:
                return obj
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "objects": [o.to_dict() for o in self.objects],
            "floor_height": self.floor_height,
            "floor_color": [int(c) for c in self.floor_color],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Scene":
        return cls(
            [SceneObject.from_dict(o) for o in data.get("objects", [])],
            data.get("floor_height", 0.0),
            tuple(data.get("floor_color", SEDIMENT_RGB)),  # type: ignore[arg-type]
        )


def _on_floor(name: str, kind: str, xy: Sequence[float], size: Tuple[float, ...], yaw: float, color, floor: float = 0.0) -> SceneObject:
    height = size[2] if kind == "box" else (size[1] if kind == "cylinder" else size[0])
    pose = RigidTransform.from_axis_angle((0, 0, 1), yaw, (xy[0], xy[1], floor + height / 2))
    return SceneObject(name, kind, pose, size, color)


def default_scene() -> Scene:
    """Brick, cinder block (sediment colored), pipe section and mug-sized cylinder."""
    return Scene(
        [
            _on_floor("brick", "box", (-0.30, 0.18), (0.202, 0.097, 0.057), 0.3, (168, 62, 44)),
            _on_floor("cinder_block", "box", (0.28, 0.22), (0.395, 0.195, 0.190), -0.2, (142, 131, 106)),
            _on_floor("pipe", "cylinder", (-0.22, -0.28), (0.097, 0.080), 0.0, (228, 228, 220)),
            _on_floor("mug", "cylinder", (0.22, -0.25), (0.085, 0.118), 0.0, (40, 90, 170)),
        ]
    )


def single_box_scene(size: float = 0.2) -> Scene:
    return Scene([_on_floor("box", "box", (0.0, 0.0), (size, size, size), 0.0, (168, 62, 44))])


def two_cluster_scene() -> Scene:
    """Two object groups far enough apart that no keyframe sees both."""
    return Scene(
        [
            _on_floor("brick", "box", (-0.55, 0.0), (0.202, 0.097, 0.057), 0.0, (168, 62, 44)),
            _on_floor("mug", "cylinder", (-0.45, 0.15), (0.085, 0.118), 0.0, (40, 90, 170)),
            _on_floor("cinder_block", "box", (0.55, 0.0), (0.395, 0.195, 0.190), 0.0, (142, 131, 106)),
        ]
    )


SCENES = {
    "default": default_scene,
    "single_box": single_box_scene,
    "two_clusters": two_cluster_scene,
    "empty": lambda: Scene([], floor_height=None),
}


def make_scene(name: str) -> Scene:
    try:
        return SCENES[name]()
    except KeyError:
        raise ValueError(f"unknown scene preset {name!r}; choose from {sorted(SCENES)}") from None


def raycast(scene: Scene, cam: PinholeCamera, pose: RigidTransform) -> Tuple[DepthImage, np.ndarray]:
    """Ground-truth ray-length depth and RGB color for every pixel."""
    dirs = cam.ray_directions().reshape(-1, 3) @ pose.rotation.T
    t, which = scene.intersect(pose.translation, dirs)
    colors = scene.colors_for(which).reshape(cam.height, cam.width, 3)
    return DepthImage(t.reshape(cam.height, cam.width)), colors


def camera_points(depth: DepthImage, cam: PinholeCamera) -> np.ndarray:
    """Camera-frame points (H, W, 3) from ray-length depths; NaN where invalid."""
    return cam.ray_directions() * depth.depths[..., None]


@dataclass(frozen=True)
class TurbidityModel:
    """Exponential loss of optical quality with range and turbidity."""
    ntu: float = 0.0
    beta: float = 0.25

    def __post_init__(self) -> None:
        if self.ntu < 0 or self.beta < 0:
            raise ValueError(f"turbidity and attenuation must be non-negative, got {self.ntu}, {self.beta}")

    def multiplier(self, ranges: np.ndarray) -> np.ndarray:
        return np.exp(-self.beta * self.ntu * np.asarray(ranges, dtype=np.float64))


def attenuate_confidence(conf: np.ndarray, depth: DepthImage, model: TurbidityModel) -> np.ndarray:
    if conf.shape != depth.shape:
        raise ValueError(f"confidence {conf.shape} and depth {depth.shape} are not aligned")
    out = conf * model.multiplier(np.where(depth.valid, depth.depths, 0.0))
    return np.where(depth.valid, out, 0.0)


def apply_haze(image: np.ndarray, depth: DepthImage, model: TurbidityModel, water: Sequence[int] = WATER_RGB) -> np.ndarray:
    """Blend colors toward the water color by the turbidity transmission."""
    m = model.multiplier(np.where(depth.valid, depth.depths, np.inf))[..., None]
    hazy = image.astype(np.float64) * m + np.asarray(water, dtype=np.float64) * (1 - m)
    return np.clip(np.round(hazy), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class SonarGeometry:
    beam_count: int = 128
    bin_count: int = 200
    h_fov: float = math.radians(130.0)
    v_fov: float = math.radians(20.0)
    max_range: float = 2.0
    gain: float = 10.0
    elevation_rays: int = 32


def simulate_sonar(scene: Scene, pose: RigidTransform, params: SonarGeometry) -> SonarScan:
    """Elevation-collapsed echo image: each beam casts a vertical fan of rays and
    every ray's first return adds gain / elevation_rays to its range bin."""
    az = beam_azimuths(params.beam_count, params.h_fov)
    el = np.linspace(-params.v_fov / 2, params.v_fov / 2, params.elevation_rays)
    dirs = sonar_directions(az[:, None], el[None, :]).reshape(-1, 3) @ pose.rotation.T
    t, _ = scene.intersect(pose.translation, dirs)
    beams = np.repeat(np.arange(params.beam_count), params.elevation_rays)
    hit = np.isfinite(t) & (t < params.max_range)
    bins = range_to_bin(t[hit], params.max_range, params.bin_count)
    intensities = np.zeros((params.beam_count, params.bin_count), dtype=np.float64)
    np.add.at(intensities, (beams[hit], bins), params.gain / params.elevation_rays)
    return SonarScan(intensities.astype(np.float32), pose, params.h_fov, params.v_fov, params.max_range)


def voxelize_surface(scene: Scene, grid: OccupancyGrid) -> np.ndarray:
    """Boolean mask of voxels whose center lies within half a voxel of any surface."""
    idx = np.indices(grid.dims).reshape(3, -1).T
    centers = grid.index_to_world_center(idx)
    near = scene.signed_distance(centers) <= grid.resolution / 2
    return near.reshape(grid.dims)


class TrajectoryKind(str, Enum):
    SWEEP = "sweep"
    OBJECT_CENTRIC = "object_centric"


@dataclass(frozen=True)
class TrajectoryParams:
    sweep_radius: float = 1.0
    sweep_height: float = 0.9
    sweep_span_deg: float = 240.0
    wrist_tilt_deg: float = 40.0
    tilt_cycles: float = 3.0
    min_standoff: float = 0.5
    stow_offset: Tuple[float, float, float] = (0.0, -0.35, 1.1)
    approach_far: float = 0.9
    approach_near: float = 0.45
    approach_elevation_deg: float = 55.0


def standoff(eye: np.ndarray, scene: Scene) -> float:
    """Smallest clearance between a sensor position and any object's bounding sphere."""
    if not scene.objects:
        return math.inf
    return min(float(np.linalg.norm(eye - o.center)) - o.bounding_radius() for o in scene.objects)


def _sweep(scene: Scene, n_frames: int, p: TrajectoryParams) -> List[RigidTransform]:
    c = scene.center()
    span = math.radians(p.sweep_span_deg)
    angles = [-math.pi / 2 - span / 2 + span * k / max(1, n_frames - 1) for k in range(n_frames)]
    poses = []
    for k, a in enumerate(angles):
        radius = p.sweep_radius
        eye = c + np.array([radius * math.cos(a), radius * math.sin(a), p.sweep_height])
        while standoff(eye, scene) < p.min_standoff:
            radius += 0.05
            eye = c + np.array([radius * math.cos(a), radius * math.sin(a), p.sweep_height])
        phase = 2 * math.pi * p.tilt_cycles * k / max(1, n_frames)
        roll = math.radians(p.wrist_tilt_deg) * math.sin(phase)
        poses.append(look_at(eye, c, roll=roll))
    return poses


def _object_centric(scene: Scene, n_frames: int, p: TrajectoryParams) -> List[RigidTransform]:
    c = scene.center()
    stow_eye = c + np.asarray(p.stow_offset)
    waypoints: List[Tuple[np.ndarray, np.ndarray]] = [(stow_eye, c)]
    elev = math.radians(p.approach_elevation_deg)
    for obj in scene.objects:
        # approach from the side facing the stowed position
        heading = stow_eye[:2] - obj.center[:2]
        heading = heading / (np.linalg.norm(heading) or 1.0)
        for dist in (p.approach_far, p.approach_near):
            offset = np.array([heading[0] * math.cos(elev), heading[1] * math.cos(elev), math.sin(elev)]) * dist
            waypoints.append((obj.center + offset, obj.center.copy()))
    if n_frames == 1 or len(waypoints) == 1:
        return [look_at(stow_eye, c)] * n_frames

    eyes = np.array([w[0] for w in waypoints])
    targets = np.array([w[1] for w in waypoints])
    seg = np.linalg.norm(np.diff(eyes, axis=0), axis=1) + np.linalg.norm(np.diff(targets, axis=0), axis=1)
    seg = np.maximum(seg, 1e-6)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    poses = []
    for s in np.linspace(0.0, cum[-1], n_frames):
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        f = (s - cum[i]) / seg[i]
        eye = eyes[i] + f * (eyes[i + 1] - eyes[i])
        target = targets[i] + f * (targets[i + 1] - targets[i])
        poses.append(look_at(eye, target))
    return poses


def gen_trajectory(
    kind: TrajectoryKind, scene: Scene, n_frames: int, params: Optional[TrajectoryParams] = None
) -> List[RigidTransform]:
    """Sensor poses (world-from-camera) for the wide acoustic sweep or the
    stowed-start, object-by-object optical approach."""
    if n_frames < 1:
        raise ValueError(f"n_frames must be at least 1, got {n_frames}")
    params = params or TrajectoryParams()
    if TrajectoryKind(kind) is TrajectoryKind.SWEEP:
        return _sweep(scene, n_frames, params)
    return _object_centric(scene, n_frames, params)
