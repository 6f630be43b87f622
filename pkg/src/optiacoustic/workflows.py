"""End-to-end workflows shared by the command line and the HTTP service."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

from .acoustic_map import OccupancyGrid, integrate_scans, read_grid, render_depth, sweep_coverage, write_grid
from .config import STREAM_ORACLE, PipelineConfig, derive_seed, load_config
from .dataset import DatasetManifest, load_dataset, read_ply, simulate_dataset, validate_dataset, write_ply
from .depth import DepthImage, write_depth
from .errors import DatasetError, InitializationFailed
from .external import ExternalProvider
from .geometry import RigidTransform
from .measure import Measurement, load_object_spec, measure_scene
from .pipeline import FusedCloud, PipelineState, Reconstructor, format_diagnostics
from .pointmap import OracleProvider, PointmapProvider
from .scene import Scene, TurbidityModel


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def resolve_config(
    config_path: Optional[PathLike] = None,
    dataset_dir: Optional[PathLike] = None,
    seed: Optional[int] = None,
) -> PipelineConfig:
    """An explicit config file wins over the dataset's own config, which wins over defaults."""
    if config_path is not None:
        cfg = load_config(config_path)
    elif dataset_dir is not None and (Path(dataset_dir) / "config").exists():
        cfg = load_config(Path(dataset_dir) / "config")
    else:
        cfg = PipelineConfig()
    if seed is not None:
        cfg = cfg.copy(update={"seed": seed})
    return cfg


def make_grid(cfg: PipelineConfig) -> OccupancyGrid:
    g = cfg.grid
    return OccupancyGrid.from_bounds(g.origin, g.size, g.resolution, g.k_hit, g.r_occ)


def simulate(cfg: PipelineConfig, out_dir: PathLike) -> DatasetManifest:
    return simulate_dataset(cfg, out_dir)


@dataclass
class MapResult:
    grid: OccupancyGrid
    coverage: float
    path: Path


def build_map(dataset_dir: PathLike, out_path: PathLike, cfg: Optional[PipelineConfig] = None) -> MapResult:
    """Integrate every sonar scan of a dataset into a fresh grid and write it."""
    ds = load_dataset(dataset_dir)
    cfg = cfg or ds.config
    if ds.manifest.scan_count == 0:
        raise DatasetError(f"{ds.root}: dataset has no sonar scans")
    missing = [p for p in ds.scan_paths() if not p.exists()]
    if missing:
        raise DatasetError(f"{ds.root}: missing sonar scan {missing[0]}")
    grid = integrate_scans(make_grid(cfg), ds.scans(), cfg.sonar.intensity_threshold, cfg.sonar.workers)
    out = Path(out_path)
    write_grid(out, grid)
    coverage = sweep_coverage(grid)
    logger.info("map: %d occupied voxels, coverage %.3f", grid.occupied_count(), coverage)
    return MapResult(grid, coverage, out)


def make_provider(cfg: PipelineConfig, scene: Optional[Scene]) -> PointmapProvider:
    if cfg.provider.kind == "external":
        return ExternalProvider(cfg.provider.command or [], cfg.provider.timeout)
    if scene is None:
        raise DatasetError("the oracle provider needs a ground-truth scene.json")
    turbidity = TurbidityModel(cfg.turbidity.ntu, cfg.turbidity.beta)
    return OracleProvider(scene, cfg.oracle, turbidity, seed=derive_seed(cfg.seed, STREAM_ORACLE))


@dataclass
class ReconstructResult:
    state: PipelineState
    cloud: FusedCloud
    ply_path: Optional[Path]
    diagnostics_path: Optional[Path]


def reconstruct(
    dataset_dir: PathLike,
    grid_path: PathLike,
    out_ply: Optional[PathLike] = None,
    diagnostics_path: Optional[PathLike] = None,
    cfg: Optional[PipelineConfig] = None,
    provider: Optional[PointmapProvider] = None,
) -> ReconstructResult:
    """Run the pipeline over a dataset against an acoustic map.

    Diagnostics are written even when initialization never succeeds; in that
    case InitializationFailed carries the last diagnostic lines.
    """
    ds = validate_dataset(dataset_dir)
    cfg = cfg or ds.config
    grid = read_grid(grid_path)
    own_provider = provider is None
    provider = provider or make_provider(cfg, ds.scene)
    recon = Reconstructor(cfg, provider, grid)
    try:
        frames = ds.frames(cfg)
        state = recon.run_realtime(frames, cfg.frame_rate) if cfg.realtime else recon.run(frames)
    finally:
        if own_provider and isinstance(provider, ExternalProvider):
            provider.close()

    diag_out = Path(diagnostics_path) if diagnostics_path else None
    if diag_out is not None:
        diag_out.write_text(format_diagnostics(state))
    if len(state.graph) == 0:
        tail = "\n".join(d.line() for d in state.diagnostics[-5:])
        raise InitializationFailed(f"initialization never succeeded over {state.frame_count} frames\n{tail}")

    cloud = recon.export_cloud()
    ply = Path(out_ply) if out_ply else None
    if ply is not None:
        write_ply(ply, cloud.points, cloud.colors)
    logger.info("reconstruct: %s", state.summary())
    return ReconstructResult(state, cloud, ply, diag_out)


def measure(ply_path: PathLike, object_spec: PathLike, inflate: float = 0.2, floor_clearance: float = 0.02) -> List[Measurement]:
    points, _ = read_ply(ply_path)
    return measure_scene(points, load_object_spec(object_spec), inflate=inflate, floor_clearance=floor_clearance)


def render_depth_at(
    grid_path: PathLike, pose: RigidTransform, cfg: PipelineConfig, out_path: Optional[PathLike] = None
) -> DepthImage:
    """Acoustic depth image for the working camera at `pose`."""
    depth = render_depth(read_grid(grid_path), cfg.camera.working(), pose)
    if out_path is not None:
        write_depth(out_path, depth)
    return depth
