"""Keyframe store, match filtering, keyframe selection, the keyframe graph with
its connected components, world alignment and the recovery buffer."""

import logging
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Deque, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import PinholeCamera, RigidTransform, relative_pose, stack_translations
from .pointmap import Frame, MatchSet, PointmapPrediction, match_projective


logger = logging.getLogger(__name__)

RECOVERY_BUFFER_SIZE = 10


@dataclass
class Keyframe:
    """A frame kept as a map node with its metric pointmap in its own camera frame.

    `pose` is the kinematic measurement; `pose_opt` and `scale` are the latest
    optimized, world-aligned pose and pointmap scale correction.
    """
    kf_id: int
    image: np.ndarray
    camera: PinholeCamera
    pose: RigidTransform
    pointmap: np.ndarray
    conf: np.ndarray
    features: np.ndarray
    feat_conf: np.ndarray
    pose_opt: Optional[RigidTransform] = None
    scale: float = 1.0
    source_path: Optional[Path] = None

    def __post_init__(self) -> None:
        h, w = self.camera.shape
        if self.pointmap.shape != (h, w, 3) or self.conf.shape != (h, w):
            raise ValueError(f"keyframe {self.kf_id}: arrays do not match the {w}x{h} camera")
        if self.pose_opt is None:
            self.pose_opt = self.pose

    @classmethod
    def from_prediction(cls, frame: Frame, pred: PointmapPrediction) -> "Keyframe":
        """Keyframe from a frame and its metric self-prediction (frame i side)."""
        return cls(
            kf_id=frame.frame_id,
            image=frame.image,
            camera=frame.camera,
            pose=frame.pose,
            pointmap=pred.X_ii,
            conf=pred.C_i,
            features=pred.D_i,
            feat_conf=pred.Q_i,
            source_path=frame.path,
        )

    @property
    def mean_conf(self) -> float:
        return float(np.mean(self.conf))

    @property
    def frame(self) -> Frame:
        return Frame(self.kf_id, self.image, self.pose, self.camera, self.source_path)

    def to_prediction(self) -> PointmapPrediction:
        """The keyframe's own data in prediction form, for keyframe-to-keyframe matching."""
        return PointmapPrediction(
            self.pointmap, self.pointmap, self.conf, self.conf,
            self.features, self.features, self.feat_conf, self.feat_conf,
        )

    def world_points(self) -> np.ndarray:
        return self.pose_opt.apply(self.pointmap * self.scale)

    def scaled(self) -> "Keyframe":
        """Copy with the scale correction folded into the pointmap."""
        return replace(self, pointmap=self.pointmap * self.scale, scale=1.0)


@dataclass
class Edge:
    """Match constraint between keyframe `a` (keyframe side) and `b` (frame side)."""
    a: int
    b: int
    fraction: float
    matches: MatchSet = field(default_factory=MatchSet, repr=False)


def filter_matches(
    m: MatchSet,
    C_f: np.ndarray,
    C_k: np.ndarray,
    Q_f: np.ndarray,
    Q_k: np.ndarray,
    tau_c: float,
    tau_q: float,
) -> MatchSet:
    """Keep matches with both pointmap confidences above `tau_c` and geometric-mean
    feature confidence above `tau_q`."""
    if len(m) == 0:
        return m
    uf, vf = m.frame_pixels[:, 0], m.frame_pixels[:, 1]
    uk, vk = m.keyframe_pixels[:, 0], m.keyframe_pixels[:, 1]
    keep = (C_k[vk, uk] > tau_c) & (C_f[vf, uf] > tau_c) & (np.sqrt(Q_f[vf, uf] * Q_k[vk, uk]) > tau_q)
    return m.subset(keep)


def keyframe_metrics(filtered: MatchSet, raw: MatchSet, height: int, width: int) -> Tuple[float, float]:
    """(alpha_match, alpha_unique): filtered matches and distinct keyframe pixels of the raw set, per pixel."""
    n = float(height * width)
    unique = np.unique(raw.keyframe_pixels, axis=0).shape[0] if len(raw) else 0
    return len(filtered) / n, unique / n


def should_add_keyframe(alpha_match: float, alpha_unique: float, tau_k: float) -> bool:
    return min(alpha_match, alpha_unique) < tau_k


def matched_points(pred_f: PointmapPrediction, keyframe: Keyframe, matches: MatchSet) -> Tuple[np.ndarray, np.ndarray]:
    """Keyframe-side and frame-side metric points of each match."""
    uf, vf = matches.frame_pixels[:, 0], matches.frame_pixels[:, 1]
    uk, vk = matches.keyframe_pixels[:, 0], matches.keyframe_pixels[:, 1]
    return keyframe.pointmap[vk, uk], pred_f.X_ii[vf, uf]


class KeyframeGraph:
    """Keyframes plus match edges whose fraction exceeds `tau_f`.

    Mutation is single-writer; readers take `snapshot()`.
    """

    def __init__(self, tau_f: float = 0.05):
        self.tau_f = tau_f
        self.keyframes: Dict[int, Keyframe] = {}
        self.edges: List[Edge] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.keyframes)

    def __iter__(self) -> Iterator[Keyframe]:
        return iter(self.keyframes.values())

    def __getitem__(self, kf_id: int) -> Keyframe:
        return self.keyframes[kf_id]

    def add_node(self, kf: Keyframe) -> None:
        if kf.kf_id in self.keyframes:
            raise ValueError(f"keyframe {kf.kf_id} already in graph")
        with self._lock:
            self.keyframes[kf.kf_id] = kf

    def add_edge(self, edge: Edge) -> None:
        if edge.a not in self.keyframes or edge.b not in self.keyframes:
            raise KeyError(f"edge {edge.a}-{edge.b} references a missing keyframe")
        if not edge.fraction > self.tau_f:
            raise ValueError(f"edge fraction {edge.fraction} not above {self.tau_f}")
        with self._lock:
            self.edges.append(edge)

    def update(self, kf_id: int, pose_opt: RigidTransform, scale: float) -> None:
        """Swap in a new optimized pose and scale (copy-on-write)."""
        with self._lock:
            self.keyframes[kf_id] = replace(self.keyframes[kf_id], pose_opt=pose_opt, scale=float(scale))

    def snapshot(self) -> List[Keyframe]:
        with self._lock:
            return list(self.keyframes.values())

    def components(self) -> Dict[int, List[int]]:
        """Connected components keyed by their smallest keyframe id; members sorted."""
        ids = sorted(self.keyframes)
        if not ids:
            return {}
        index = {k: i for i, k in enumerate(ids)}
        rows = [index[e.a] for e in self.edges]
        cols = [index[e.b] for e in self.edges]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
        _, labels = connected_components(adj, directed=False)
        groups: Dict[int, List[int]] = {}
        for kf_id, label in zip(ids, labels):
            groups.setdefault(int(label), []).append(kf_id)
        return {members[0]: members for members in groups.values()}

    def component_of(self, kf_id: int) -> int:
        for cid, members in self.components().items():
            if kf_id in members:
                return cid
        raise KeyError(kf_id)

    def edges_within(self, members: Sequence[int]) -> List[Edge]:
        s = set(members)
        return [e for e in self.edges if e.a in s and e.b in s]

    def dump(self) -> str:
        """Line-oriented graph text: one `keyframe` line per node and one `edge` line per edge."""
        comp = {k: cid for cid, members in self.components().items() for k in members}
        lines = []
        for kf in self.snapshot():
            t = kf.pose_opt.translation
            q = kf.pose_opt.quaternion()
            vals = " ".join(f"{v:.9f}" for v in list(t) + list(q))
            lines.append(f"keyframe {kf.kf_id} component {comp[kf.kf_id]} scale {kf.scale:.9f} pose {vals}")
        for e in self.edges:
            lines.append(f"edge {e.a} {e.b} fraction {e.fraction:.6f} matches {len(e.matches)}")
        return "\n".join(lines) + "\n"


def add_keyframe_and_edges(
    g: KeyframeGraph,
    kf: Keyframe,
    tau_c: float,
    tau_q: float,
    delta_depth: float,
    rho_feat: float,
) -> List[Edge]:
    """Insert `kf`, match it against every existing keyframe and add the edges above `tau_f`.

    Overlap is judged on the optimized, world-aligned poses and scale-corrected
    pointmaps, so keyframes placed by earlier optimizations are matched where
    they now sit.
    """
    existing = g.snapshot()
    g.add_node(kf)
    mine = kf.scaled()
    pred = mine.to_prediction()
    h, w = kf.camera.shape
    added = []
    for other in existing:
        ref = other.scaled()
        t_ok = relative_pose(ref.pose_opt, mine.pose_opt)
        raw = match_projective(pred, ref, t_ok, delta_depth, rho_feat)
        filtered = filter_matches(raw, kf.conf, other.conf, kf.feat_conf, other.feat_conf, tau_c, tau_q)
        fraction = len(filtered) / float(h * w)
        if fraction > g.tau_f:
            edge = Edge(other.kf_id, kf.kf_id, fraction, filtered)
            g.add_edge(edge)
            added.append(edge)
    logger.info("keyframe %d added with %d edges (%d keyframes)", kf.kf_id, len(added), len(g))
    return added


def _project_to_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1
    return u @ s @ vt


def align_to_world(measured: Sequence[RigidTransform], optimized: Sequence[RigidTransform]) -> RigidTransform:
    """Rigid X with measured ~ X * optimized, fitted on keyframe translations.

    Falls back to chordal rotation averaging of R_measured R_optimized^T when the
    translations are too few or collinear to fix a rotation.
    """
    if len(measured) != len(optimized):
        raise ValueError(f"pose lists differ in length: {len(measured)} vs {len(optimized)}")
    if not measured:
        raise ValueError("cannot align an empty pose set")
    q = stack_translations(measured)
    p = stack_translations(optimized)
    mq, mp = q.mean(axis=0), p.mean(axis=0)
    dq, dp = q - mq, p - mp
    sv = np.linalg.svd(dp, compute_uv=False) if len(p) >= 3 else np.zeros(1)
    if len(p) >= 3 and sv[0] > 1e-9 and sv[1] > 1e-6 * sv[0]:
        r = _project_to_rotation(dq.T @ dp)
    else:
        r = _project_to_rotation(sum(m.rotation @ o.rotation.T for m, o in zip(measured, optimized)))
    return RigidTransform(r, mq - r @ mp)


@dataclass
class RecoveryBuffer:
    """The most recent candidate references, ordered oldest to newest."""
    entries: Deque[Keyframe] = field(default_factory=lambda: deque(maxlen=RECOVERY_BUFFER_SIZE))

    @classmethod
    def start(cls, last_keyframe: Keyframe) -> "RecoveryBuffer":
        buf = cls()
        buf.push(last_keyframe)
        return buf

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, entry: Keyframe) -> None:
        self.entries.append(entry)

    def select(self) -> Keyframe:
        """Entry with the highest mean confidence; the most recent wins ties."""
        if not self.entries:
            raise IndexError("recovery buffer is empty")
        best = self.entries[-1]
        for entry in reversed(self.entries):
            if entry.mean_conf > best.mean_conf:
                best = entry
        return best


def recovery_step(buf: RecoveryBuffer, entry: Keyframe) -> Keyframe:
    """Pick the reference for the incoming frame, then buffer the frame itself."""
    ref = buf.select()
    buf.push(entry)
    return ref
