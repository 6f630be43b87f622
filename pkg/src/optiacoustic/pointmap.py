"""Two-view pointmap predictions, the synthetic oracle predictor, optical depth
and projective data association.

Prediction cache file layout (little-endian): header `b"OAPM"`, uint32 version,
uint32 H, uint32 W, uint32 d; then float32 arrays in order X_ii (H*W*3),
X_ij (H*W*3), C_i, C_j (H*W each), D_i, D_j (H*W*d each), Q_i, Q_j (H*W each).
Pixels without a prediction hold NaN points.
"""

import logging
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Protocol, Tuple, Union, runtime_checkable

import numpy as np

from .config import OracleConfig
from .depth import DepthImage
from .errors import FormatError, PredictorInputError
from .geometry import PinholeCamera, RigidTransform, relative_pose
from .scene import Scene, TurbidityModel, camera_points, raycast

if TYPE_CHECKING:  # pragma: no cover
    from .keyframes import Keyframe


logger = logging.getLogger(__name__)

MAX_INPUT_DIM = 512
PREDICTION_MAGIC = b"OAPM"
PREDICTION_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
FEATURE_CELL = 0.01


@dataclass
class Frame:
    """One camera frame at the predictor's input resolution with its kinematic pose."""
    frame_id: int
    image: np.ndarray
    pose: RigidTransform
    camera: PinholeCamera
    path: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"frame {self.frame_id}: expected an HxWx3 image, got {self.image.shape}")
        if self.image.shape[:2] != self.camera.shape:
            raise ValueError(
                f"frame {self.frame_id}: image {self.image.shape[:2]} does not match camera {self.camera.shape}"
            )


@dataclass
class PointmapPrediction:
    X_ii: np.ndarray
    X_ij: np.ndarray
    C_i: np.ndarray
    C_j: np.ndarray
    D_i: np.ndarray
    D_j: np.ndarray
    Q_i: np.ndarray
    Q_j: np.ndarray

    def __post_init__(self) -> None:
        h, w = self.C_i.shape
        for name in ("X_ii", "X_ij"):
            if getattr(self, name).shape != (h, w, 3):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {(h, w, 3)}")
        for name in ("C_j", "Q_i", "Q_j"):
            if getattr(self, name).shape != (h, w):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {(h, w)}")
        if self.D_i.ndim != 3 or self.D_i.shape[:2] != (h, w) or self.D_i.shape[2] < 1:
            raise ValueError(f"D_i has shape {self.D_i.shape}, expected {(h, w)} x d")
        if self.D_j.shape != self.D_i.shape:
            raise ValueError(f"D_j has shape {self.D_j.shape}, expected {self.D_i.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.C_i.shape  # type: ignore[return-value]

    @property
    def feature_dim(self) -> int:
        return int(self.D_i.shape[2])

    def mean_conf(self) -> float:
        return float(np.mean(self.C_i))


@dataclass
class MatchSet:
    """Pixel correspondences frame -> keyframe as (u, v) integer pairs."""
    frame_pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    keyframe_pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self) -> None:
        self.frame_pixels = np.asarray(self.frame_pixels, dtype=np.int64).reshape(-1, 2)
        self.keyframe_pixels = np.asarray(self.keyframe_pixels, dtype=np.int64).reshape(-1, 2)
        if len(self.frame_pixels) != len(self.keyframe_pixels):
            raise ValueError("frame and keyframe pixel lists differ in length")

    def __len__(self) -> int:
        return len(self.frame_pixels)

    def subset(self, mask: np.ndarray) -> "MatchSet":
        return MatchSet(self.frame_pixels[mask], self.keyframe_pixels[mask])


@runtime_checkable
class PointmapProvider(Protocol):
    """Anything that turns two frames into a dense two-view prediction."""

    def predict_pair(self, frame_i: Frame, frame_j: Frame) -> PointmapPrediction:
        ...


def predict(provider: PointmapProvider, frame_i: Frame, frame_j: Frame) -> PointmapPrediction:
    """Run `provider` on a frame pair after checking the predictor input contract."""
    a, b = frame_i.image, frame_j.image
    if a.shape != b.shape:
        raise PredictorInputError(f"image sizes differ: {a.shape} vs {b.shape}")
    if max(a.shape[:2]) > MAX_INPUT_DIM:
        raise PredictorInputError(f"image {a.shape[1]}x{a.shape[0]} exceeds the {MAX_INPUT_DIM} px input limit")
    pred = provider.predict_pair(frame_i, frame_j)
    if pred.shape != a.shape[:2]:
        raise PredictorInputError(f"provider returned {pred.shape} for {a.shape[:2]} images")
    return pred


def optical_depth(pred: PointmapPrediction) -> DepthImage:
    return DepthImage(np.linalg.norm(pred.X_ii, axis=-1))


_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_PRIMES = (np.uint64(0x8DA6B343), np.uint64(0xD8163841), np.uint64(0xCB1AB31F), np.uint64(0x165667B1))


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _lattice_values(cells: np.ndarray, dim: int) -> np.ndarray:
    """Deterministic values in [-1, 1) for integer lattice cells (N, 3) -> (N, dim)."""
    c = np.ascontiguousarray(cells, dtype=np.int64).view(np.uint64)
    key = (c[:, 0] * _PRIMES[0]) ^ (c[:, 1] * _PRIMES[1]) ^ (c[:, 2] * _PRIMES[2])
    d = np.arange(dim, dtype=np.uint64) * _PRIMES[3]
    h = _splitmix64(key[:, None] ^ d[None, :])
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 / 2 ** 53) - 1.0


def surface_features(points: np.ndarray, dim: int, cell: float = FEATURE_CELL) -> np.ndarray:
    """Smooth descriptors of world points: trilinear interpolation of hashed lattice values.

    Nearby surface points get nearly parallel descriptors, distant ones nearly
    orthogonal ones.
    """
    p = np.asarray(points, dtype=np.float64) / cell
    base = np.floor(p)
    frac = p - base
    base = base.astype(np.int64)
    out = np.zeros((p.shape[0], dim))
    with np.errstate(over="ignore"):
        for corner in np.ndindex(2, 2, 2):
            off = np.array(corner)
            w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
            out += w[:, None] * _lattice_values(base + off, dim)
    return out


class OracleProvider:
    """Ground-truth predictor over a synthetic scene.

    Each call draws an arbitrary pointmap scale, optional depth noise and
    outliers from a stream seeded by (seed, frame_i, frame_j), so repeated calls
    on the same pair are identical. Thread-safe.
    """

    def __init__(self, scene: Scene, cfg: Optional[OracleConfig] = None,
                 turbidity: Optional[TurbidityModel] = None, seed: int = 0, cache_size: int = 16):
        self.scene = scene
        self.cfg = cfg or OracleConfig()
        self.turbidity = turbidity or TurbidityModel()
        self.seed = int(seed)
        self._cache: "OrderedDict[Tuple[int, bytes], DepthImage]" = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    def _depth(self, frame: Frame) -> DepthImage:
        key = (frame.frame_id, frame.pose.matrix().tobytes())
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        depth, _ = raycast(self.scene, frame.camera, frame.pose)
        with self._lock:
            self._cache[key] = depth
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return depth

    def _corrupt(self, points: np.ndarray, depth: DepthImage, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        out = points.copy()
        valid = depth.valid
        if cfg.noise_sigma > 0:
            r = np.where(valid, depth.depths, 1.0)
            noisy = np.maximum(r + rng.normal(0.0, cfg.noise_sigma, r.shape), 1e-3)
            out *= (noisy / r)[..., None]
        if cfg.outlier_fraction > 0:
            bad = rng.random(valid.shape) < cfg.outlier_fraction
            factor = rng.uniform(0.3, 3.0, valid.shape)
            out = np.where(bad[..., None], out * factor[..., None], out)
        return out

    def _confidence(self, depth: DepthImage) -> np.ndarray:
        r = np.where(depth.valid, depth.depths, 0.0)
        conf = self.cfg.conf_max * np.exp(-self.cfg.conf_decay * r) * self.turbidity.multiplier(r)
        return np.where(depth.valid, conf, 0.0)

    def _features(self, frame: Frame, depth: DepthImage, rng: np.random.Generator) -> np.ndarray:
        dim = self.cfg.feature_dim
        h, w = depth.shape
        feats = np.zeros((h, w, dim))
        valid = depth.valid
        if valid.any():
            world = frame.pose.apply(camera_points(depth, frame.camera)[valid])
            feats[valid] = surface_features(world, dim)
        if self.cfg.feature_noise > 0:
            feats += rng.normal(0.0, self.cfg.feature_noise, feats.shape)
        feats[~valid] = 0.0
        return feats

    def predict_pair(self, frame_i: Frame, frame_j: Frame) -> PointmapPrediction:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, frame_i.frame_id, frame_j.frame_id]))
        cfg = self.cfg
        scale = cfg.fixed_scale if cfg.fixed_scale is not None else rng.uniform(cfg.scale_min, cfg.scale_max)
        depth_i = self._depth(frame_i)
        depth_j = self._depth(frame_j)

        x_ii = self._corrupt(camera_points(depth_i, frame_i.camera), depth_i, rng)
        x_jj = self._corrupt(camera_points(depth_j, frame_j.camera), depth_j, rng)
        x_ij = relative_pose(frame_i.pose, frame_j.pose).apply(x_jj)

        c_i = self._confidence(depth_i)
        c_j = self._confidence(depth_j)
        pred = PointmapPrediction(
            X_ii=x_ii * scale,
            X_ij=x_ij * scale,
            C_i=c_i,
            C_j=c_j,
            D_i=self._features(frame_i, depth_i, rng),
            D_j=self._features(frame_j, depth_j, rng),
            Q_i=np.clip(c_i / cfg.conf_max, 0.0, 1.0),
            Q_j=np.clip(c_j / cfg.conf_max, 0.0, 1.0),
        )
        logger.debug("oracle %d/%d: scale %.4f, mean conf %.3f", frame_i.frame_id, frame_j.frame_id, scale, pred.mean_conf())
        return pred


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    dot = np.einsum("ij,ij->i", a, b)
    return np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)


def match_projective(
    pred_f: PointmapPrediction,
    keyframe: "Keyframe",
    T_kf: RigidTransform,
    delta_depth: float = 0.075,
    rho_feat: float = 0.7,
) -> MatchSet:
    """Associate frame pixels with keyframe pixels by projecting metric frame points.

    A frame pixel matches the keyframe pixel nearest to its projection when the
    projected ray length agrees with the keyframe's pointmap depth there within
    `delta_depth` and their descriptors have cosine similarity >= `rho_feat`.
    Matches come out in row-major frame pixel order.
    """
    cam = keyframe.camera
    pts = pred_f.X_ii
    valid = np.all(np.isfinite(pts), axis=-1)
    vs, us = np.nonzero(valid)
    if us.size == 0:
        return MatchSet()
    p_k = T_kf.apply(pts[vs, us])
    uv, front = cam.project(p_k)
    uk = np.rint(uv[:, 0])
    vk = np.rint(uv[:, 1])
    ok = front & (uk >= 0) & (uk < cam.width) & (vk >= 0) & (vk < cam.height)
    us, vs, p_k = us[ok], vs[ok], p_k[ok]
    uk, vk = uk[ok].astype(np.int64), vk[ok].astype(np.int64)

    kf_depth = np.linalg.norm(keyframe.pointmap[vk, uk], axis=-1)
    ok = np.isfinite(kf_depth) & (np.abs(np.linalg.norm(p_k, axis=-1) - kf_depth) <= delta_depth)
    us, vs, uk, vk = us[ok], vs[ok], uk[ok], vk[ok]

    sim = _cosine(pred_f.D_i[vs, us], keyframe.features[vk, uk])
    ok = sim >= rho_feat
    return MatchSet(np.stack([us[ok], vs[ok]], axis=1), np.stack([uk[ok], vk[ok]], axis=1))


def write_prediction(path: Union[str, Path], pred: PointmapPrediction) -> None:
    h, w = pred.shape
    parts = [_HEADER.pack(PREDICTION_MAGIC, PREDICTION_VERSION, h, w, pred.feature_dim)]
    for name in ("X_ii", "X_ij", "C_i", "C_j", "D_i", "D_j", "Q_i", "Q_j"):
        parts.append(np.ascontiguousarray(getattr(pred, name), dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_prediction(path: Union[str, Path]) -> PointmapPrediction:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated prediction header")
    magic, version, h, w, d = _HEADER.unpack_from(raw)
    if magic != PREDICTION_MAGIC or version != PREDICTION_VERSION:
        raise FormatError(f"{path}: not a prediction cache file (magic {magic!r}, version {version})")
    if h == 0 or w == 0 or d == 0:
        raise FormatError(f"{path}: empty prediction {h}x{w}x{d}")
    shapes = [(h, w, 3), (h, w, 3), (h, w), (h, w), (h, w, d), (h, w, d), (h, w), (h, w)]
    expected = _HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    arrays = []
    offset = _HEADER.size
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float64))
        offset += 4 * n
    return PointmapPrediction(*arrays)
