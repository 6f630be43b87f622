"""FastAPI server exposing simulate/map/reconstruct/measure/render endpoints.

The API is intended for local development and tooling integration. Every
endpoint works on paths on the server's filesystem; nothing is persisted
beyond the files the request names.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from optiacoustic import workflows
from optiacoustic.config import with_overrides
from optiacoustic.errors import OptiAcousticError
from optiacoustic.geometry import look_at


app = FastAPI(title="Opti-Acoustic Reconstruction API", version="1.0.0")

# Allow local dev frontends to call the API in the browser
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class SimulateRequest(BaseModel):
    """Request for /simulate: output directory plus simulation overrides."""
    out_dir: str
    scene: str = "default"
    frames: int = Field(100, ge=1)
    scans: int = Field(60, ge=1)
    ntu: float = Field(0.0, ge=0.0)
    seed: int = 0
    config_path: Optional[str] = None


class SimulateResponse(BaseModel):
    out_dir: str
    frames: int
    scans: int
    ntu: float


class MapRequest(BaseModel):
    """Request for /map: dataset directory and optional grid output path."""
    dataset: str
    out: Optional[str] = None
    config_path: Optional[str] = None


class MapResponse(BaseModel):
    path: str
    occupied_voxels: int
    coverage: float


class ReconstructRequest(BaseModel):
    """Request for /reconstruct: dataset, acoustic map and output cloud."""
    dataset: str
    grid: str
    out: str
    diagnostics: Optional[str] = None
    seed: Optional[int] = None
    realtime: bool = False
    full_optimize: bool = False
    config_path: Optional[str] = None


class ReconstructResponse(BaseModel):
    """Response for /reconstruct: output files and the run summary."""
    ply: str
    diagnostics: Optional[str]
    points: int
    summary: Dict[str, Any]


class MeasureRequest(BaseModel):
    cloud: str
    objects: str
    inflate: float = Field(0.2, ge=0.0)
    floor_clearance: float = Field(0.02, ge=0.0)


class MeasurementModel(BaseModel):
    name: str
    ground_truth: float
    measured: Optional[float]
    error_pct: Optional[float]
    points: int


class MeasureResponse(BaseModel):
    measurements: List[MeasurementModel]


class RenderDepthRequest(BaseModel):
    """Request for /render_depth: grid path and a look-at camera pose."""
    grid: str
    eye: List[float] = Field(..., min_items=3, max_items=3)
    target: List[float] = Field(..., min_items=3, max_items=3)
    out: Optional[str] = None
    config_path: Optional[str] = None


class RenderDepthResponse(BaseModel):
    height: int
    width: int
    valid_fraction: float
    min_depth: Optional[float]
    max_depth: Optional[float]


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail=str(exc))


@app.get("/health")
def health() -> Dict[str, str]:
    """Liveness check endpoint."""
    return {"status": "ok"}


@app.post("/simulate", response_model=SimulateResponse)
def post_simulate(req: SimulateRequest) -> SimulateResponse:
    """Generate a synthetic dataset on disk."""
    try:
        cfg = workflows.resolve_config(req.config_path, seed=req.seed)
        cfg = with_overrides(
            cfg,
            simulation={"scene": req.scene, "n_frames": req.frames, "sweep_scans": req.scans},
            turbidity={"ntu": req.ntu},
        )
        manifest = workflows.simulate(cfg, req.out_dir)
    except (OptiAcousticError, OSError, ValueError) as exc:
        raise _bad_request(exc)
    return SimulateResponse(out_dir=req.out_dir, frames=manifest.frame_count, scans=manifest.scan_count, ntu=manifest.ntu)


@app.post("/map", response_model=MapResponse)
def post_map(req: MapRequest) -> MapResponse:
    """Integrate a dataset's sonar scans into an occupancy grid."""
    out = req.out or str(Path(req.dataset) / "grid.oavg")
    try:
        cfg = workflows.resolve_config(req.config_path, req.dataset)
        result = workflows.build_map(req.dataset, out, cfg)
    except (OptiAcousticError, OSError, ValueError) as exc:
        raise _bad_request(exc)
    return MapResponse(path=str(result.path), occupied_voxels=result.grid.occupied_count(), coverage=result.coverage)


@app.post("/reconstruct", response_model=ReconstructResponse)
def post_reconstruct(req: ReconstructRequest) -> ReconstructResponse:
    """Run the reconstruction pipeline and write the fused cloud."""
    try:
        cfg = workflows.resolve_config(req.config_path, req.dataset, req.seed)
        cfg = cfg.copy(update={"realtime": req.realtime, "full_optimize": req.full_optimize})
        result = workflows.reconstruct(req.dataset, req.grid, req.out, req.diagnostics, cfg)
    except (OptiAcousticError, OSError, ValueError) as exc:
        raise _bad_request(exc)
    return ReconstructResponse(
        ply=str(result.ply_path),
        diagnostics=str(result.diagnostics_path) if result.diagnostics_path else None,
        points=len(result.cloud),
        summary=result.state.summary(),
    )


@app.post("/measure", response_model=MeasureResponse)
def post_measure(req: MeasureRequest) -> MeasureResponse:
    """Measure ground-truth objects in a PLY cloud; undetected objects have null sizes."""
    try:
        results = workflows.measure(req.cloud, req.objects, req.inflate, req.floor_clearance)
    except (OptiAcousticError, OSError, ValueError) as exc:
        raise _bad_request(exc)
    return MeasureResponse(
        measurements=[
            MeasurementModel(
                name=m.name,
                ground_truth=m.ground_truth,
                measured=m.measured,
                error_pct=m.error_pct,
                points=m.n_points,
            )
            for m in results
        ]
    )


@app.post("/render_depth", response_model=RenderDepthResponse)
def post_render_depth(req: RenderDepthRequest) -> RenderDepthResponse:
    """Render the acoustic depth image seen from a look-at pose."""
    try:
        cfg = workflows.resolve_config(req.config_path)
        pose = look_at(req.eye, req.target)
        depth = workflows.render_depth_at(req.grid, pose, cfg, req.out)
    except (OptiAcousticError, OSError, ValueError) as exc:
        raise _bad_request(exc)
    values = depth.depths[depth.valid]
    return RenderDepthResponse(
        height=depth.shape[0],
        width=depth.shape[1],
        valid_fraction=depth.valid_fraction(),
        min_depth=float(values.min()) if values.size else None,
        max_depth=float(values.max()) if values.size else None,
    )
