"""Acoustic occupancy mapping from multibeam sonar scans and depth rendering.

Each above-threshold (beam, range bin) cell of a scan constrains its echo to an
elevation arc. Arcs from many viewpoints intersect at true surfaces, so a voxel
becomes occupied once it has gathered enough hits relative to the times it was
seen empty. Rendering walks camera rays voxel by voxel through the finished grid.

Grid file layout (little-endian):
    header  `b"OAVG"`, uint32 version, 3 x float64 origin, float64 resolution,
            3 x uint32 dims, uint32 k_hit, float64 r_occ
    uint32 run count, then that many uint32 run lengths of the flattened
            occupancy (C order), alternating starting with a run of free voxels
    hit counts as nx*ny*nz uint32, then miss counts as nx*ny*nz uint32

Sonar scan file layout (little-endian):
    header  `b"OASS"`, uint32 beams, uint32 bins, float64 h_fov, float64 v_fov,
            float64 max_range, 9 x float64 rotation (row-major), 3 x float64 translation
    beams*bins float32 intensities, beam-major
"""

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .depth import DepthImage
from .errors import FormatError, InvalidPoseError
from .geometry import PinholeCamera, RigidTransform


logger = logging.getLogger(__name__)

GRID_MAGIC = b"OAVG"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sI3dd3IId")
SONAR_MAGIC = b"OASS"
_SONAR_HEADER = struct.Struct("<4sII3d12d")

DEFAULT_K_HIT = 3
DEFAULT_R_OCC = 0.3


@dataclass
class OccupancyGrid:
    """Dense voxel grid with per-voxel hit/miss evidence.

    Voxel (i, j, k) spans `origin + [i, i+1) * resolution` along x (likewise y, z).
    """
    origin: np.ndarray
    resolution: float
    dims: Tuple[int, int, int]
    hit_count: np.ndarray = None
    miss_count: np.ndarray = None
    occupancy: np.ndarray = None
    k_hit: int = DEFAULT_K_HIT
    r_occ: float = DEFAULT_R_OCC

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)  # type: ignore[assignment]
        if not self.resolution > 0:
            raise ValueError(f"grid resolution must be positive, got {self.resolution}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"grid dims must be three positive counts, got {self.dims}")
        if self.hit_count is None:
            self.hit_count = np.zeros(self.dims, dtype=np.uint32)
        if self.miss_count is None:
            self.miss_count = np.zeros(self.dims, dtype=np.uint32)
        if self.occupancy is None:
            self.recompute_occupancy()

    @classmethod
    def from_bounds(
        cls,
        lower: Sequence[float],
        size: Sequence[float],
        resolution: float,
        k_hit: int = DEFAULT_K_HIT,
        r_occ: float = DEFAULT_R_OCC,
    ) -> "OccupancyGrid":
        """Grid with its (0, 0, 0) corner at `lower` covering at least `size` meters."""
        dims = tuple(max(1, int(math.ceil(s / resolution - 1e-9))) for s in size)
        return cls(np.asarray(lower, dtype=np.float64), resolution, dims, k_hit=k_hit, r_occ=r_occ)  # type: ignore[arg-type]

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.resolution

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(np.asarray(self.dims) * self.resolution))

    def empty_like(self) -> "OccupancyGrid":
        return OccupancyGrid(self.origin.copy(), self.resolution, self.dims, k_hit=self.k_hit, r_occ=self.r_occ)

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(
            self.origin.copy(),
            self.resolution,
            self.dims,
            self.hit_count.copy(),
            self.miss_count.copy(),
            self.occupancy.copy(),
            self.k_hit,
            self.r_occ,
        )

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.floor((p - self.origin) / self.resolution).astype(np.int64)

    def index_to_world_center(self, index: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) * self.resolution

    def in_bounds(self, index: np.ndarray) -> np.ndarray:
        idx = np.asarray(index)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def linear_index(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Flat (C order) voxel index of each point, and a mask of points inside the grid."""
        idx = self.world_to_index(points)
        inside = self.in_bounds(idx)
        safe = np.where(inside[..., None], idx, 0)
        lin = np.ravel_multi_index(tuple(np.moveaxis(safe, -1, 0)), self.dims)
        return lin, inside

    def recompute_occupancy(self) -> None:
        hits = self.hit_count.astype(np.float64)
        total = hits + self.miss_count
        self.occupancy = (self.hit_count >= self.k_hit) & (hits >= self.r_occ * total) & (self.hit_count > 0)

    def add_counts(self, other: "OccupancyGrid") -> None:
        """Accumulate another grid's evidence (same geometry) into this one."""
        if other.dims != self.dims or not np.allclose(other.origin, self.origin) or other.resolution != self.resolution:
            raise ValueError("cannot merge grids with different geometry")
        self.hit_count += other.hit_count
        self.miss_count += other.miss_count
        self.recompute_occupancy()

    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    def occupied_centers(self) -> np.ndarray:
        return self.index_to_world_center(np.argwhere(self.occupancy))


@dataclass
class SonarScan:
    """One multibeam ping: intensities per (beam, range bin) and the sensor pose.

    Sonar frame: z along the boresight, x to the right, y down. Beams fan out in
    azimuth across the x-z plane; the elevation angle (towards -y) is unobserved.
    """
    intensities: np.ndarray
    pose: RigidTransform
    h_fov: float
    v_fov: float
    max_range: float

    def __post_init__(self) -> None:
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        if self.intensities.ndim != 2 or min(self.intensities.shape) < 1:
            raise ValueError(f"intensities must be beams x bins, got {self.intensities.shape}")
        if np.any(self.intensities < 0):
            raise ValueError("sonar intensities must be non-negative")
        if not (0 < self.h_fov <= math.pi and 0 < self.v_fov <= math.pi):
            raise ValueError(f"fields of view must lie in (0, pi], got {self.h_fov}, {self.v_fov}")
        if not self.max_range > 0:
            raise ValueError(f"max_range must be positive, got {self.max_range}")

    @property
    def beam_count(self) -> int:
        return int(self.intensities.shape[0])

    @property
    def bin_count(self) -> int:
        return int(self.intensities.shape[1])

    def bin_ranges(self) -> np.ndarray:
        return (np.arange(self.bin_count) + 0.5) * self.max_range / self.bin_count

    def beam_azimuths(self) -> np.ndarray:
        return beam_azimuths(self.beam_count, self.h_fov)


def beam_azimuths(beam_count: int, h_fov: float) -> np.ndarray:
    return -h_fov / 2 + (np.arange(beam_count) + 0.5) * h_fov / beam_count


def sonar_directions(azimuth: np.ndarray, elevation: np.ndarray) -> np.ndarray:
    """Unit vectors in the sonar frame for broadcastable azimuth/elevation arrays."""
    az, el = np.broadcast_arrays(np.asarray(azimuth, dtype=np.float64), np.asarray(elevation, dtype=np.float64))
    return np.stack([np.cos(el) * np.sin(az), -np.sin(el), np.cos(el) * np.cos(az)], axis=-1)


def range_to_bin(ranges: np.ndarray, max_range: float, bin_count: int) -> np.ndarray:
    return np.floor(np.asarray(ranges) * bin_count / max_range).astype(np.int64)


def elevation_samples(v_fov: float, max_arc_range: float, resolution: float) -> np.ndarray:
    """Elevation angles spaced at most resolution / (2 * range) apart across the fan."""
    step = resolution / (2.0 * max(max_arc_range, resolution))
    n = max(2, int(math.ceil(v_fov / step)) + 1)
    return np.linspace(-v_fov / 2, v_fov / 2, n)


def _arc_voxels(
    grid: OccupancyGrid, scan: SonarScan, beams: np.ndarray, bins: np.ndarray, group: np.ndarray
) -> np.ndarray:
    """Unique `group * voxel_count + voxel` keys for the arcs of the given cells."""
    if beams.size == 0:
        return np.zeros(0, dtype=np.int64)
    ranges = scan.bin_ranges()[bins]
    elev = elevation_samples(scan.v_fov, float(ranges.max()), grid.resolution)
    dirs = sonar_directions(scan.beam_azimuths()[beams][:, None], elev[None, :])
    pts = scan.pose.apply(dirs * ranges[:, None, None])
    lin, inside = grid.linear_index(pts)
    keys = group.astype(np.int64)[:, None] * grid.voxel_count + lin
    return np.unique(keys[inside])


def integrate_scan(
    grid: OccupancyGrid, scan: SonarScan, intensity_threshold: float, beam_chunk: int = 64
) -> OccupancyGrid:
    """Accumulate one scan's evidence into `grid` in place and return it.

    Hits: every voxel on the elevation arc of an above-threshold cell, once per
    cell. Misses: voxels on the arcs of bins strictly before a beam's first
    above-threshold bin, once per beam, excluding voxels that beam also hit.
    Beams without any return contribute nothing.
    """
    if not (np.all(np.isfinite(scan.pose.rotation)) and np.all(np.isfinite(scan.pose.translation))):
        raise InvalidPoseError("sonar scan pose is not finite")
    above = scan.intensities > intensity_threshold
    n = grid.voxel_count
    hits = np.zeros(n, dtype=np.int64)
    misses = np.zeros(n, dtype=np.int64)
    for start in range(0, scan.beam_count, beam_chunk):
        block = above[start : start + beam_chunk]
        if not block.any():
            continue
        b_local, k = np.nonzero(block)
        b = b_local + start
        cell = b * scan.bin_count + k
        hit_keys = _arc_voxels(grid, scan, b, k, cell)
        hit_vox = hit_keys % n
        hits += np.bincount(hit_vox, minlength=n)

        has_return = block.any(axis=1)
        first = np.argmax(block, axis=1)
        mb, mk = [], []
        for local in np.flatnonzero(has_return):
            if first[local] > 0:
                mb.append(np.full(first[local], local + start))
                mk.append(np.arange(first[local]))
        if mb:
            beams_m = np.concatenate(mb)
            miss_keys = _arc_voxels(grid, scan, beams_m, np.concatenate(mk), beams_m)
            beam_hit_keys = np.unique((hit_keys // n // scan.bin_count) * n + hit_vox)
            miss_keys = miss_keys[~np.isin(miss_keys, beam_hit_keys, assume_unique=True)]
            misses += np.bincount(miss_keys % n, minlength=n)

    grid.hit_count += hits.reshape(grid.dims).astype(np.uint32)
    grid.miss_count += misses.reshape(grid.dims).astype(np.uint32)
    grid.recompute_occupancy()
    logger.debug("integrated scan: %d hit cells, %d occupied voxels", int(above.sum()), grid.occupied_count())
    return grid


def integrate_scans(
    grid: OccupancyGrid, scans: Iterable[SonarScan], intensity_threshold: float, workers: int = 1
) -> OccupancyGrid:
    """Integrate many scans; with `workers > 1`, partitions scans over threads and sums counts."""
    scans = list(scans)
    if workers <= 1 or len(scans) < 2:
        for scan in scans:
            integrate_scan(grid, scan, intensity_threshold)
        return grid

    def run(part: List[SonarScan]) -> OccupancyGrid:
        local = grid.empty_like()
        for scan in part:
            integrate_scan(local, scan, intensity_threshold)
        return local

    parts = [scans[i::workers] for i in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for local in pool.map(run, parts):
            grid.add_counts(local)
    return grid


def _ray_box(origin: np.ndarray, dirs: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Entry/exit ray parameters against an axis-aligned box (entry > exit means a miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lower - origin) / dirs
        t2 = (upper - origin) / dirs
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    flat = dirs == 0
    inside = (origin >= lower) & (origin <= upper)
    tmin = np.where(flat, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(flat, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=-1), tmax.min(axis=-1)


def _first_occupied_entry(
    grid: OccupancyGrid, origin: np.ndarray, dirs: np.ndarray, t_start: np.ndarray, t_end: np.ndarray
) -> np.ndarray:
    """Walk each ray voxel by voxel over [t_start, t_end] and return the ray length
    at which it enters its first occupied voxel (NaN if none)."""
    depth = np.full(dirs.shape[0], np.nan)
    rays = np.flatnonzero(t_start <= t_end)
    if rays.size == 0:
        return depth
    res = grid.resolution
    dims = np.asarray(grid.dims)
    d = dirs[rays]
    t_cur = t_start[rays].copy()
    t_stop = t_end[rays]
    start = origin + d * t_cur[:, None]
    vox = np.clip(np.floor((start - grid.origin) / res).astype(np.int64), 0, dims - 1)
    sign = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        face = grid.origin + (vox + (sign > 0)) * res
        t_next = np.where(sign != 0, (face - origin) / d, np.inf)
        t_delta = np.where(sign != 0, res / np.abs(d), np.inf)

    active = np.arange(rays.size)
    while active.size:
        v = vox[active]
        hit = grid.occupancy[v[:, 0], v[:, 1], v[:, 2]]
        depth[rays[active[hit]]] = t_cur[active[hit]]
        active = active[~hit]
        if active.size == 0:
            break
        axis = np.argmin(t_next[active], axis=1)
        t_cur[active] = t_next[active, axis]
        vox[active, axis] += sign[active, axis]
        t_next[active, axis] += t_delta[active, axis]
        v = vox[active]
        inside = np.all((v >= 0) & (v < dims), axis=1)
        active = active[inside & (t_cur[active] <= t_stop[active])]
    return depth


def _first_occupied_sample(
    grid: OccupancyGrid, origin: np.ndarray, dirs: np.ndarray, t_start: np.ndarray, t_end: np.ndarray, step: float
) -> np.ndarray:
    """Ray length of the first sample at (k - 1/2) * step, k >= 1, that lies in an occupied voxel."""
    depth = np.full(dirs.shape[0], np.nan)
    k_first = np.maximum(1, np.ceil(t_start / step + 0.5))
    k_last = np.floor(t_end / step + 0.5)
    live = k_first <= k_last
    if not live.any():
        return depth
    occ = grid.occupancy.ravel()
    dims = np.asarray(grid.dims)
    for k in range(int(k_first[live].min()), int(k_last[live].max()) + 1):
        idx = np.flatnonzero(live & (k_first <= k) & (k_last >= k))
        if idx.size == 0:
            continue
        t = (k - 0.5) * step
        vox = np.floor((origin + dirs[idx] * t - grid.origin) / grid.resolution).astype(np.int64)
        inside = np.all((vox >= 0) & (vox < dims), axis=1)
        idx, vox = idx[inside], vox[inside]
        hit = occ[np.ravel_multi_index(vox.T, grid.dims)]
        depth[idx[hit]] = t
        live[idx[hit]] = False
    return depth


def render_depth(
    grid: OccupancyGrid,
    cam: PinholeCamera,
    pose: RigidTransform,
    max_range: Optional[float] = None,
    step: Optional[float] = None,
) -> DepthImage:
    """Acoustic depth image: ray length to the first occupied voxel along each pixel ray.

    Rays start half a step from the camera center, so a camera sitting inside an
    occupied voxel sees it at every pixel, and stop at `max_range` (default: the
    grid diagonal). Without `step` every voxel a ray crosses is visited and the
    depth is where the ray enters the first occupied one. With `step`, rays are
    sampled at (k - 1/2) * step for k = 1, 2, ... and the depth is the first
    sample inside an occupied voxel; thin corner crossings can be missed.
    """
    max_range = float(max_range or grid.diagonal)
    dirs = cam.ray_directions().reshape(-1, 3) @ pose.rotation.T
    origin = pose.translation
    if not grid.occupancy.any():
        return DepthImage(np.full((cam.height, cam.width), np.nan))

    t_in, t_out = _ray_box(origin, dirs, grid.origin, grid.upper)
    t_end = np.minimum(t_out, max_range)
    if step is None:
        t_start = np.maximum(t_in, 0.5 * grid.resolution)
        depth = _first_occupied_entry(grid, origin, dirs, t_start, t_end)
    else:
        if not step > 0:
            raise ValueError(f"render step must be positive, got {step}")
        depth = _first_occupied_sample(grid, origin, dirs, t_in, t_end, float(step))
    return DepthImage(depth.reshape(cam.height, cam.width))


def sweep_coverage(grid: OccupancyGrid) -> float:
    """Fraction of voxels that received any hit or miss evidence."""
    observed = (grid.hit_count.astype(np.int64) + grid.miss_count) > 0
    return float(np.count_nonzero(observed)) / grid.voxel_count


def _encode_runs(occupancy: np.ndarray) -> np.ndarray:
    flat = occupancy.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat.size and flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype("<u4")


def _decode_runs(runs: np.ndarray, size: int) -> np.ndarray:
    values = (np.arange(runs.size) % 2) == 1
    flat = np.repeat(values, runs.astype(np.int64))
    if flat.size != size:
        raise FormatError(f"occupancy runs cover {flat.size} voxels, expected {size}")
    return flat


def write_grid(path: Union[str, Path], grid: OccupancyGrid) -> None:
    runs = _encode_runs(grid.occupancy)
    header = _GRID_HEADER.pack(
        GRID_MAGIC, GRID_VERSION, *grid.origin, grid.resolution, *grid.dims, grid.k_hit, grid.r_occ
    )
    body = [
        header,
        struct.pack("<I", runs.size),
        runs.tobytes(),
        grid.hit_count.astype("<u4").tobytes(),
        grid.miss_count.astype("<u4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(body))


def read_grid(path: Union[str, Path]) -> OccupancyGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _GRID_HEADER.size + 4:
        raise FormatError(f"{path}: truncated grid header")
    fields = _GRID_HEADER.unpack_from(raw)
    if fields[0] != GRID_MAGIC or fields[1] != GRID_VERSION:
        raise FormatError(f"{path}: not a version {GRID_VERSION} grid file")
    origin, resolution, dims, k_hit, r_occ = fields[2:5], fields[5], fields[6:9], fields[9], fields[10]
    offset = _GRID_HEADER.size
    (n_runs,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    n = int(np.prod(dims))
    expected = offset + 4 * n_runs + 8 * n
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    runs = np.frombuffer(raw, dtype="<u4", count=n_runs, offset=offset)
    offset += 4 * n_runs
    occupancy = _decode_runs(runs, n).reshape(dims)
    hits = np.frombuffer(raw, dtype="<u4", count=n, offset=offset).reshape(dims).astype(np.uint32)
    misses = np.frombuffer(raw, dtype="<u4", count=n, offset=offset + 4 * n).reshape(dims).astype(np.uint32)
    return OccupancyGrid(np.array(origin), resolution, dims, hits, misses, occupancy, k_hit, r_occ)


def write_scan(path: Union[str, Path], scan: SonarScan) -> None:
    header = _SONAR_HEADER.pack(
        SONAR_MAGIC,
        scan.beam_count,
        scan.bin_count,
        scan.h_fov,
        scan.v_fov,
        scan.max_range,
        *scan.pose.rotation.ravel(),
        *scan.pose.translation,
    )
    Path(path).write_bytes(header + scan.intensities.astype("<f4").tobytes())


def read_scan(path: Union[str, Path]) -> SonarScan:
    raw = Path(path).read_bytes()
    if len(raw) < _SONAR_HEADER.size:
        raise FormatError(f"{path}: truncated sonar header")
    fields = _SONAR_HEADER.unpack_from(raw)
    if fields[0] != SONAR_MAGIC:
        raise FormatError(f"{path}: bad sonar magic {fields[0]!r}")
    beams, bins = fields[1], fields[2]
    h_fov, v_fov, max_range = fields[3:6]
    rotation = np.array(fields[6:15]).reshape(3, 3)
    translation = np.array(fields[15:18])
    expected = _SONAR_HEADER.size + 4 * beams * bins
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_SONAR_HEADER.size).reshape(beams, bins)
    try:
        pose = RigidTransform(rotation, translation)
        return SonarScan(data.copy(), pose, h_fov, v_fov, max_range)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
