"""Object size measurement in a reconstructed cloud.

Each object is measured from the points inside its ground-truth bounding box
inflated by 20%, after dropping points near the floor; the reported size is the
largest extent along the cropped points' principal axes.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .errors import DatasetError
from .scene import Scene, SceneObject


logger = logging.getLogger(__name__)

MIN_POINTS = 3


@dataclass
class Measurement:
    name: str
    ground_truth: float
    measured: Optional[float]
    n_points: int
    extents: Optional[np.ndarray] = None

    @property
    def detected(self) -> bool:
        return self.measured is not None

    @property
    def error_pct(self) -> Optional[float]:
        if self.measured is None:
            return None
        return abs(self.measured - self.ground_truth) / self.ground_truth * 100.0

    def line(self) -> str:
        if self.measured is None:
            return f"{self.name}: measured=ND truth={self.ground_truth:.4f} m error=ND points={self.n_points}"
        return (
            f"{self.name}: measured={self.measured:.4f} m truth={self.ground_truth:.4f} m "
            f"error={self.error_pct:.2f}% points={self.n_points}"
        )


def principal_extents(points: np.ndarray) -> np.ndarray:
    """Extents of `points` along their principal axes, largest first."""
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt.T
    return np.sort(proj.max(axis=0) - proj.min(axis=0))[::-1]


def crop_object(
    points: np.ndarray,
    obj: SceneObject,
    inflate: float = 0.2,
    floor_height: Optional[float] = 0.0,
    floor_clearance: float = 0.02,
) -> np.ndarray:
    local = obj.pose.inverse().apply(points)
    inside = np.all(np.abs(local) <= obj.half_extents() * (1.0 + inflate), axis=1)
    if floor_height is not None:
        inside &= points[:, 2] > floor_height + floor_clearance
    return points[inside]


def measure_object(points: np.ndarray, obj: SceneObject, **crop) -> Measurement:
    cropped = crop_object(np.asarray(points, dtype=np.float64).reshape(-1, 3), obj, **crop)
    if len(cropped) < MIN_POINTS:
        logger.info("%s: not detected (%d points in crop)", obj.name, len(cropped))
        return Measurement(obj.name, obj.ground_truth_size(), None, len(cropped))
    ext = principal_extents(cropped)
    return Measurement(obj.name, obj.ground_truth_size(), float(ext[0]), len(cropped), ext)


def measure_scene(
    points: np.ndarray, scene: Scene, inflate: float = 0.2, floor_clearance: float = 0.02
) -> List[Measurement]:
    return [
        measure_object(points, obj, inflate=inflate, floor_height=scene.floor_height, floor_clearance=floor_clearance)
        for obj in scene.objects
    ]


def format_report(measurements: List[Measurement]) -> str:
    return "\n".join(m.line() for m in measurements) + "\n"


def load_object_spec(path: Union[str, Path]) -> Scene:
    """Ground-truth objects from a dataset directory or a scene JSON file."""
    p = Path(path)
    if p.is_dir():
        p = p / "scene.json"
    try:
        return Scene.from_dict(json.loads(p.read_text()))
    except FileNotFoundError as exc:
        raise DatasetError(f"no object spec at {p}") from exc
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{p}: invalid object spec: {exc}") from exc
