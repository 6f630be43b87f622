"""Rigid transforms, the pinhole camera model and the pose file format.

Depth is measured as ray length throughout the package: a pixel's depth is the
Euclidean norm of its camera-frame point, not its z coordinate.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError, InvalidPoseError


ORTHONORMAL_TOL = 1e-9
REORTHONORMALIZE_TOL = 1e-7


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Closest proper rotation to `m` in the Frobenius sense."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation plus translation mapping points as p -> R p + t.

    Poses are stored world-from-camera (`T_Wc`) unless named otherwise.
    """
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidPoseError(f"expected 3x3 rotation and 3-vector, got {r.shape} and {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidPoseError("rigid transform contains non-finite values")
        drift = max(np.abs(r.T @ r - np.eye(3)).max(), abs(np.linalg.det(r) - 1.0))
        if drift > REORTHONORMALIZE_TOL:
            if np.linalg.det(r) <= 0 or drift > 1e-2:
                raise InvalidPoseError(f"rotation is not orthonormal (drift {drift:.3g})")
            r = _project_to_rotation(r)
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_axis_angle(
        cls, axis: Sequence[float], angle: float, translation: Sequence[float] = (0.0, 0.0, 0.0)
    ) -> "RigidTransform":
        """Build from a rotation axis (any length) and angle in radians."""
        a = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(a)
        if n == 0:
            raise InvalidPoseError("rotation axis must be non-zero")
        return cls(Rotation.from_rotvec(a / n * angle).as_matrix(), translation)

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float], translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(), translation)

    @classmethod
    def from_quaternion(cls, quat_xyzw: Sequence[float], translation: Sequence[float]) -> "RigidTransform":
        q = np.asarray(quat_xyzw, dtype=np.float64)
        if not np.all(np.isfinite(q)) or np.linalg.norm(q) == 0:
            raise InvalidPoseError(f"invalid quaternion {q}")
        return cls(Rotation.from_quat(q).as_matrix(), translation)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidPoseError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w) with non-negative w."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other (apply `other` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def __repr__(self) -> str:
        t = ", ".join(f"{v:.4f}" for v in self.translation)
        r = ", ".join(f"{v:.4f}" for v in self.rotvec())
        return f"RigidTransform(rotvec=[{r}], t=[{t}])"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def transform_points(t: RigidTransform, pts: np.ndarray) -> np.ndarray:
    return t.apply(pts)


def relative_pose(t_wa: RigidTransform, t_wb: RigidTransform) -> RigidTransform:
    """Pose of frame b expressed in frame a, `T_ab = T_Wa^-1 T_Wb`."""
    return t_wa.inverse().compose(t_wb)


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole intrinsics; pixel (u, v) denotes the pixel center at integer coordinates."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def strided(self, stride: int) -> "PinholeCamera":
        """Camera over every `stride`-th pixel; its pixel (u, v) is pixel (stride*u, stride*v) here."""
        if stride < 1:
            raise ValueError(f"stride must be at least 1, got {stride}")
        return PinholeCamera(
            self.fx / stride, self.fy / stride, self.cx / stride, self.cy / stride,
            -(-self.width // stride), -(-self.height // stride),
        )

    def in_bounds(self, u: float, v: float) -> bool:
        return 0 <= u < self.width and 0 <= v < self.height

    def backproject(self, u: float, v: float, depth: float) -> np.ndarray:
        """Camera-frame point on the ray through (u, v) at ray length `depth`."""
        if not self.in_bounds(u, v):
            raise ValueError(f"pixel ({u}, {v}) outside {self.width}x{self.height}")
        if not depth > 0:
            raise ValueError(f"depth must be positive, got {depth}")
        ray = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        return ray / np.linalg.norm(ray) * depth

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Project camera-frame points (..., 3) to pixels (..., 2).

        Returns the pixel coordinates and a mask of points in front of the camera.
        """
        p = np.asarray(points, dtype=np.float64)
        z = p[..., 2]
        front = z > 1e-12
        safe_z = np.where(front, z, 1.0)
        uv = np.stack(
            [self.fx * p[..., 0] / safe_z + self.cx, self.fy * p[..., 1] / safe_z + self.cy], axis=-1
        )
        return uv, front

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions through every pixel center, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64), np.arange(self.height, dtype=np.float64))
        rays = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def rescale_camera(cam: PinholeCamera, new_w: int, new_h: int) -> PinholeCamera:
    """Intrinsics for the same optics sampled at a new image size."""
    if new_w <= 0 or new_h <= 0:
        raise ValueError(f"new size must be positive, got {new_w}x{new_h}")
    sx = new_w / cam.width
    sy = new_h / cam.height
    return PinholeCamera(
        fx=cam.fx * sx, fy=cam.fy * sy, cx=cam.cx * sx, cy=cam.cy * sy, width=int(new_w), height=int(new_h)
    )


def fit_to_max_dim(width: int, height: int, max_dim: int) -> Tuple[int, int]:
    """Largest size with the same aspect ratio whose longer side is at most `max_dim`."""
    longest = max(width, height)
    if longest <= max_dim:
        return width, height
    s = max_dim / longest
    return max(1, int(round(width * s))), max(1, int(round(height * s)))


def look_at(
    eye: Sequence[float],
    target: Sequence[float],
    up: Sequence[float] = (0.0, 0.0, 1.0),
    roll: float = 0.0,
) -> RigidTransform:
    """World-from-camera pose of a camera at `eye` whose optical axis points at `target`.

    Camera axes: x right, y down, z forward. `roll` rotates about the optical axis.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=1)
    if roll:
        r = r @ Rotation.from_rotvec([0.0, 0.0, roll]).as_matrix()
    return RigidTransform(r, eye)


PathLike = Union[str, Path]


def write_poses(path: PathLike, poses: Dict[int, RigidTransform]) -> None:
    """Write `frame_id tx ty tz qx qy qz qw` lines, world-from-camera."""
    lines = []
    for frame_id in sorted(poses):
        t = poses[frame_id]
        vals = list(t.translation) + list(t.quaternion())
        lines.append(f"{frame_id} " + " ".join(f"{v:.17g}" for v in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_poses(path: PathLike) -> Dict[int, RigidTransform]:
    poses: Dict[int, RigidTransform] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            frame_id = int(parts[0])
            vals = [float(p) for p in parts[1:]]
            poses[frame_id] = RigidTransform.from_quaternion(vals[3:], vals[:3])
        except (ValueError, InvalidPoseError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return poses


def rotation_angle(t: RigidTransform, other: Optional[RigidTransform] = None) -> float:
    """Rotation angle (radians) of `t`, or of the rotation between `t` and `other`."""
    r = t.rotation if other is None else t.rotation @ other.rotation.T
    return float(np.linalg.norm(Rotation.from_matrix(r).as_rotvec()))


def stack_translations(poses: Iterable[RigidTransform]) -> np.ndarray:
    return np.array([p.translation for p in poses], dtype=np.float64).reshape(-1, 3)
