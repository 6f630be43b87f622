"""Frame-by-frame reconstruction: initialization, tracking against the last
keyframe, acoustic rescaling, keyframe insertion with graph optimization,
recovery mode and fused point cloud export."""

import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .acoustic_map import OccupancyGrid, render_depth
from .color import color_correct
from .config import PipelineConfig, ransac_rng
from .depth import DepthImage
from .errors import (
    DegenerateRefinement,
    InvalidScaleError,
    PredictorInputError,
    ProviderError,
    ScaleUnavailable,
    ScaleUnreliable,
)
from .geometry import relative_pose
from .keyframes import (
    Keyframe,
    KeyframeGraph,
    RecoveryBuffer,
    add_keyframe_and_edges,
    align_to_world,
    filter_matches,
    keyframe_metrics,
    matched_points,
    should_add_keyframe,
)
from .optimizer import OptimizationResult, optimize_component
from .pointmap import Frame, PointmapPrediction, PointmapProvider, match_projective, optical_depth, predict
from .scale import apply_scale, filter_depth_pairs, ransac_scale, refine_scale


logger = logging.getLogger(__name__)


class Mode(str, Enum):
    INITIALIZING = "Initializing"
    TRACKING = "Tracking"
    RECOVERY = "Recovery"


def _fmt(value: Optional[float], digits: int = 6) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


@dataclass
class FrameDiagnostics:
    frame_id: int
    mode: Mode
    s_m: Optional[float] = None
    s_p: Optional[float] = None
    alpha_match: Optional[float] = None
    alpha_unique: Optional[float] = None
    keyframe: bool = False
    note: str = ""

    def line(self) -> str:
        parts = [
            f"frame={self.frame_id}",
            f"mode={self.mode.value}",
            f"s_m={_fmt(self.s_m)}",
            f"s_p={_fmt(self.s_p)}",
            f"alpha_match={_fmt(self.alpha_match, 4)}",
            f"alpha_unique={_fmt(self.alpha_unique, 4)}",
            f"keyframe={int(self.keyframe)}",
        ]
        if self.note:
            parts.append(f"note={self.note}")
        return " ".join(parts)


@dataclass
class PipelineState:
    graph: KeyframeGraph
    grid: OccupancyGrid
    mode: Mode = Mode.INITIALIZING
    last_keyframe: Optional[int] = None
    recovery: Optional[RecoveryBuffer] = None
    scale: Optional[float] = None
    frame_count: int = 0
    diagnostics: List[FrameDiagnostics] = field(default_factory=list)
    transitions: List[Tuple[int, Mode, Mode]] = field(default_factory=list)
    recovery_episodes: int = 0
    scale_fallbacks: int = 0
    skipped: int = 0
    dropped: int = 0
    optimizations: List[OptimizationResult] = field(default_factory=list)

    def summary(self) -> Dict[str, int]:
        return {
            "frames": self.frame_count,
            "keyframes": len(self.graph),
            "components": len(self.graph.components()),
            "recovery_episodes": self.recovery_episodes,
            "scale_fallbacks": self.scale_fallbacks,
            "skipped": self.skipped,
            "dropped": self.dropped,
            "transitions": len(self.transitions),
            "unconverged": sum(1 for r in self.optimizations if not r.converged),
        }


@dataclass
class FusedCloud:
    """World-frame points with colors and the keyframe each point came from."""
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.uint8))
    source: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.points.shape[0])


class FrameSlot:
    """Single-slot handoff: a new frame replaces any frame not yet taken."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._frame: Optional[Frame] = None
        self._closed = False
        self.dropped = 0

    def put(self, frame: Frame) -> None:
        with self._cond:
            if self._frame is not None:
                self.dropped += 1
            self._frame = frame
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify()

    def take(self) -> Optional[Frame]:
        """Latest frame, blocking until one arrives; None once closed and drained."""
        with self._cond:
            while self._frame is None and not self._closed:
                self._cond.wait()
            frame, self._frame = self._frame, None
            return frame


class Reconstructor:
    """Owns the pipeline state; one thread drives `process_frame`."""

    def __init__(self, cfg: PipelineConfig, provider: PointmapProvider, grid: OccupancyGrid):
        self.cfg = cfg
        self.provider = provider
        self.state = PipelineState(graph=KeyframeGraph(cfg.thresholds.tau_f), grid=grid)

    def _set_mode(self, frame_id: int, mode: Mode) -> None:
        st = self.state
        if mode is not st.mode:
            st.transitions.append((frame_id, st.mode, mode))
            logger.info("frame %d: %s -> %s", frame_id, st.mode.value, mode.value)
            st.mode = mode

    def _record(self, diag: FrameDiagnostics) -> PipelineState:
        self.state.diagnostics.append(diag)
        logger.debug(diag.line())
        return self.state

    def _metric_scale(self, frame: Frame, pred: PointmapPrediction) -> float:
        # both depth images on every k-th pixel
        k = self.cfg.ransac.pixel_stride
        d_ac = render_depth(self.state.grid, frame.camera.strided(k), frame.pose)
        d_opt = DepthImage(optical_depth(pred).depths[::k, ::k])
        pairs = filter_depth_pairs(d_opt, d_ac, pred.C_i[::k, ::k])
        return ransac_scale(pairs, self.cfg.ransac, ransac_rng(self.cfg, frame.frame_id)).scale

    def initialize(self, frame: Frame) -> PipelineState:
        """Try to install `frame` as the first keyframe from its self-prediction."""
        st = self.state
        st.frame_count += 1
        diag = FrameDiagnostics(frame.frame_id, st.mode)
        try:
            pred = predict(self.provider, frame, frame)
        except (ProviderError, PredictorInputError) as exc:
            st.skipped += 1
            logger.warning("frame %d skipped: %s", frame.frame_id, exc)
            diag.note = f"provider_error:{type(exc).__name__}"
            return self._record(diag)
        if not np.max(pred.C_i) > self.cfg.thresholds.tau_i:
            diag.note = "low_confidence"
            return self._record(diag)
        try:
            s_m = self._metric_scale(frame, pred)
        except (ScaleUnavailable, ScaleUnreliable) as exc:
            logger.warning("frame %d: initialization scale failed: %s", frame.frame_id, exc)
            diag.note = type(exc).__name__
            return self._record(diag)

        kf = Keyframe.from_prediction(frame, apply_scale(pred, s_m))
        self._insert_keyframe(kf)
        st.scale = s_m
        self._set_mode(frame.frame_id, Mode.TRACKING)
        diag.mode, diag.s_m, diag.keyframe = st.mode, s_m, True
        return self._record(diag)

    def process_frame(self, frame: Frame) -> PipelineState:
        st = self.state
        if st.mode is Mode.INITIALIZING:
            return self.initialize(frame)
        st.frame_count += 1
        th = self.cfg.thresholds
        diag = FrameDiagnostics(frame.frame_id, st.mode)

        if st.mode is Mode.RECOVERY:
            ref = st.recovery.select()
        else:
            ref = st.graph[st.last_keyframe]
        try:
            pred = predict(self.provider, frame, ref.frame)
        except (ProviderError, PredictorInputError) as exc:
            st.skipped += 1
            logger.warning("frame %d skipped: %s", frame.frame_id, exc)
            diag.note = f"provider_error:{type(exc).__name__}"
            return self._record(diag)

        try:
            s_m = self._metric_scale(frame, pred)
            st.scale = s_m
        except (ScaleUnavailable, ScaleUnreliable) as exc:
            st.scale_fallbacks += 1
            logger.warning("frame %d: %s; reusing scale %s", frame.frame_id, exc, st.scale)
            s_m = st.scale
            diag.note = "scale_fallback"
        diag.s_m = s_m
        pred = apply_scale(pred, s_m)

        t_kf = relative_pose(ref.pose, frame.pose)
        raw = match_projective(pred, ref, t_kf, th.delta_depth, th.rho_feat)
        filtered = filter_matches(raw, pred.C_i, ref.conf, pred.Q_i, ref.feat_conf, th.tau_c, th.tau_q)
        s_p = 1.0
        if len(filtered):
            pts_k, pts_f = matched_points(pred, ref, filtered)
            try:
                s_p = refine_scale(pts_k, pts_f, t_kf)
                pred = apply_scale(pred, s_p)
            except (DegenerateRefinement, InvalidScaleError) as exc:
                logger.warning("frame %d: scale refinement skipped: %s", frame.frame_id, exc)
                s_p = 1.0
        diag.s_p = s_p
        h, w = frame.camera.shape
        a_match, a_unique = keyframe_metrics(filtered, raw, h, w)
        diag.alpha_match, diag.alpha_unique = a_match, a_unique

        entry = Keyframe.from_prediction(frame, pred)
        if st.mode is Mode.TRACKING:
            if a_match < th.tau_r:
                st.recovery = RecoveryBuffer.start(ref)
                st.recovery.push(entry)
                st.recovery_episodes += 1
                self._set_mode(frame.frame_id, Mode.RECOVERY)
            elif should_add_keyframe(a_match, a_unique, th.tau_k):
                self._insert_keyframe(entry)
                diag.keyframe = True
        else:
            st.recovery.push(entry)
            if a_match >= th.tau_k:
                self._insert_keyframe(entry)
                diag.keyframe = True
                st.recovery = None
                self._set_mode(frame.frame_id, Mode.TRACKING)
        diag.mode = st.mode
        return self._record(diag)

    def _insert_keyframe(self, kf: Keyframe) -> None:
        th = self.cfg.thresholds
        st = self.state
        add_keyframe_and_edges(st.graph, kf, th.tau_c, th.tau_q, th.delta_depth, th.rho_feat)
        st.last_keyframe = kf.kf_id
        components = st.graph.components()
        targets = list(components) if self.cfg.full_optimize else [st.graph.component_of(kf.kf_id)]
        for cid in targets:
            st.optimizations.append(optimize_component(st.graph, cid, self.cfg.optimizer))
            self._align_component(components[cid])

    def _align_component(self, members: List[int]) -> None:
        graph = self.state.graph
        kfs = [graph[k] for k in members]
        x = align_to_world([k.pose for k in kfs], [k.pose_opt for k in kfs])
        for kf in kfs:
            graph.update(kf.kf_id, x.compose(kf.pose_opt), kf.scale)

    def run(self, frames: Iterable[Frame]) -> PipelineState:
        """Replay mode: every frame is processed in order."""
        for frame in frames:
            self.process_frame(frame)
        return self.state

    def run_realtime(self, frames: Iterable[Frame], frame_rate: float) -> PipelineState:
        """Play frames at `frame_rate` from a producer thread; stale frames are dropped."""
        slot = FrameSlot()

        def produce() -> None:
            try:
                for frame in frames:
                    slot.put(frame)
                    time.sleep(1.0 / frame_rate)
            finally:
                slot.close()

        producer = threading.Thread(target=produce, name="frame-producer", daemon=True)
        producer.start()
        while True:
            frame = slot.take()
            if frame is None:
                break
            self.process_frame(frame)
        producer.join()
        self.state.dropped += slot.dropped
        return self.state

    def export_cloud(self) -> FusedCloud:
        """World-frame points of every keyframe above the confidence threshold, color corrected."""
        points, colors, source = [], [], []
        for kf in self.state.graph.snapshot():
            mask = (kf.conf > self.cfg.thresholds.tau_c) & np.all(np.isfinite(kf.pointmap), axis=-1)
            if not mask.any():
                continue
            points.append(kf.world_points()[mask])
            colors.append(color_correct(kf.image)[mask])
            source.append(np.full(int(mask.sum()), kf.kf_id, dtype=np.int64))
        if not points:
            return FusedCloud()
        return FusedCloud(np.concatenate(points), np.concatenate(colors), np.concatenate(source))


def format_diagnostics(state: PipelineState) -> str:
    lines = [d.line() for d in state.diagnostics]
    summary = " ".join(f"{k}={v}" for k, v in state.summary().items())
    lines.append(f"# summary {summary}")
    return "\n".join(lines) + "\n"
