"""Gauss-Newton refinement of keyframe poses and pointmap scales per graph component.

Each keyframe carries a 7-vector correction: world-frame rotation (omega),
translation (v) and log-scale (delta), applied as R <- Exp(omega) R,
t <- t + v, s <- s * exp(delta). Residuals are the world-space differences of
matched points between edge-connected keyframes, plus weighted priors pulling
each pose toward its kinematic measurement and each log-scale toward zero.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from scipy import linalg
from scipy.spatial.transform import Rotation

from .config import OptimizerConfig
from .geometry import RigidTransform
from .keyframes import Edge, KeyframeGraph


logger = logging.getLogger(__name__)

DOF = 7
DAMPING = 1e-9
MAX_HALVINGS = 12


@dataclass
class OptimizationResult:
    component_id: int
    members: List[int]
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = True
    poses: Dict[int, RigidTransform] = field(default_factory=dict)
    scales: Dict[int, float] = field(default_factory=dict)


def _skew(v: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices, (N, 3) -> (N, 3, 3)."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


@dataclass
class _EdgeTerm:
    a: int
    b: int
    x_a: np.ndarray
    x_b: np.ndarray


class _State:
    def __init__(self, rotations: np.ndarray, translations: np.ndarray, log_scales: np.ndarray):
        self.r = rotations
        self.t = translations
        self.sigma = log_scales

    def retract(self, delta: np.ndarray) -> "_State":
        d = delta.reshape(-1, DOF)
        rot = Rotation.from_rotvec(d[:, :3]).as_matrix() @ self.r
        return _State(rot, self.t + d[:, 3:6], self.sigma + d[:, 6])

    def world(self, i: int, x: np.ndarray) -> np.ndarray:
        return (x * np.exp(self.sigma[i])) @ self.r[i].T + self.t[i]


def _edge_terms(graph: KeyframeGraph, edges: List[Edge], index: Dict[int, int], cap: int) -> List[_EdgeTerm]:
    terms = []
    for e in edges:
        ka, kb = graph[e.a], graph[e.b]
        m = e.matches
        if len(m) == 0:
            continue
        x_a = ka.pointmap[m.keyframe_pixels[:, 1], m.keyframe_pixels[:, 0]]
        x_b = kb.pointmap[m.frame_pixels[:, 1], m.frame_pixels[:, 0]]
        ok = np.all(np.isfinite(x_a), axis=1) & np.all(np.isfinite(x_b), axis=1)
        x_a, x_b = x_a[ok], x_b[ok]
        if len(x_a) > cap:
            pick = np.linspace(0, len(x_a) - 1, cap).astype(np.int64)
            x_a, x_b = x_a[pick], x_b[pick]
        if len(x_a):
            terms.append(_EdgeTerm(index[e.a], index[e.b], x_a, x_b))
    return terms


def _prior_residuals(state: _State, meas_r: np.ndarray, meas_t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    rot = Rotation.from_matrix(state.r @ np.transpose(meas_r, (0, 2, 1))).as_rotvec()
    return rot, state.t - meas_t


def _cost(state: _State, terms: List[_EdgeTerm], meas_r: np.ndarray, meas_t: np.ndarray, cfg: OptimizerConfig) -> float:
    total = 0.0
    for term in terms:
        r = state.world(term.a, term.x_a) - state.world(term.b, term.x_b)
        total += float(np.sum(r * r))
    rot, trans = _prior_residuals(state, meas_r, meas_t)
    total += cfg.w_prior * float(np.sum(rot * rot) + np.sum(trans * trans))
    total += cfg.w_scale * float(np.sum(state.sigma ** 2))
    return total


def _normal_equations(
    state: _State, terms: List[_EdgeTerm], meas_r: np.ndarray, meas_t: np.ndarray, cfg: OptimizerConfig
) -> Tuple[np.ndarray, np.ndarray]:
    n = state.r.shape[0]
    h = np.zeros((n * DOF, n * DOF))
    g = np.zeros(n * DOF)
    for term in terms:
        y_a = (term.x_a * np.exp(state.sigma[term.a])) @ state.r[term.a].T
        y_b = (term.x_b * np.exp(state.sigma[term.b])) @ state.r[term.b].T
        res = (y_a + state.t[term.a]) - (y_b + state.t[term.b])
        eye = np.broadcast_to(np.eye(3), y_a.shape + (3,))
        j_a = np.concatenate([-_skew(y_a), eye, y_a[..., None]], axis=2)
        j_b = -np.concatenate([-_skew(y_b), eye, y_b[..., None]], axis=2)
        blocks = {term.a: j_a, term.b: j_b}
        for i, ji in blocks.items():
            si = slice(i * DOF, (i + 1) * DOF)
            g[si] += np.einsum("nki,nk->i", ji, res)
            for k, jk in blocks.items():
                sk = slice(k * DOF, (k + 1) * DOF)
                h[si, sk] += np.einsum("nki,nkj->ij", ji, jk)

    rot, trans = _prior_residuals(state, meas_r, meas_t)
    for i in range(n):
        base = i * DOF
        h[base : base + 6, base : base + 6] += cfg.w_prior * np.eye(6)
        g[base : base + 3] += cfg.w_prior * rot[i]
        g[base + 3 : base + 6] += cfg.w_prior * trans[i]
        h[base + 6, base + 6] += cfg.w_scale
        g[base + 6] += cfg.w_scale * state.sigma[i]
    h[np.diag_indices_from(h)] += DAMPING
    return h, g


def optimize_component(graph: KeyframeGraph, component_id: int, cfg: OptimizerConfig) -> OptimizationResult:
    """Jointly refine the poses and scales of one connected component in place.

    Singleton components are returned untouched. Steps that raise the cost are
    halved; when `max_iters` runs out first, the best iterate is kept and the
    result is flagged as not converged.
    """
    members = graph.components().get(component_id)
    if members is None:
        raise KeyError(f"no component with id {component_id}")
    result = OptimizationResult(component_id, list(members))
    kfs = [graph[k] for k in members]
    if len(members) == 1:
        result.poses = {k.kf_id: k.pose_opt for k in kfs}
        result.scales = {k.kf_id: k.scale for k in kfs}
        return result

    index = {k: i for i, k in enumerate(members)}
    terms = _edge_terms(graph, graph.edges_within(members), index, cfg.max_points_per_edge)
    meas_r = np.stack([k.pose.rotation for k in kfs])
    meas_t = np.stack([k.pose.translation for k in kfs])
    state = _State(
        np.stack([k.pose_opt.rotation for k in kfs]),
        np.stack([k.pose_opt.translation for k in kfs]),
        np.log(np.array([k.scale for k in kfs], dtype=np.float64)),
    )
    cost = _cost(state, terms, meas_r, meas_t, cfg)
    result.initial_cost = cost
    result.converged = False
    for it in range(1, cfg.max_iters + 1):
        result.iterations = it
        h, g = _normal_equations(state, terms, meas_r, meas_t, cfg)
        step = linalg.solve(h, -g, assume_a="sym")
        accepted = False
        for _ in range(MAX_HALVINGS):
            candidate = state.retract(step)
            new_cost = _cost(candidate, terms, meas_r, meas_t, cfg)
            if new_cost <= cost:
                accepted = True
                break
            step = step / 2
        if not accepted:
            result.converged = True
            break
        decrease = cost - new_cost
        state, cost = candidate, new_cost
        if decrease <= cfg.tolerance * max(1.0, cost) or np.max(np.abs(step)) < 1e-12:
            result.converged = True
            break

    if not result.converged:
        logger.warning("component %d: no convergence after %d iterations (cost %.3g)", component_id, result.iterations, cost)
    result.final_cost = cost
    for kf_id, i in index.items():
        pose = RigidTransform(state.r[i], state.t[i])
        scale = float(np.exp(state.sigma[i]))
        graph.update(kf_id, pose, scale)
        result.poses[kf_id] = pose
        result.scales[kf_id] = scale
    logger.debug("component %d: cost %.6g -> %.6g in %d iterations", component_id, result.initial_cost, cost, result.iterations)
    return result
