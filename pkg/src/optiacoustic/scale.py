"""Metric scale recovery: RANSAC fit of optical to acoustic depths, and the
closed-form pointmap scale refinement against a keyframe."""

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .config import RansacConfig
from .depth import DepthImage
from .errors import DegenerateRefinement, InvalidScaleError, ScaleUnavailable, ScaleUnreliable
from .geometry import RigidTransform
from .pointmap import PointmapPrediction


logger = logging.getLogger(__name__)

# hypotheses x pairs evaluated per block
_BLOCK_ELEMENTS = 1 << 22


@dataclass
class DepthPairSet:
    """Optical/acoustic depth pairs at the pixels usable for scale fitting."""
    d_opt: np.ndarray
    d_ac: np.ndarray
    pixels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.d_opt = np.asarray(self.d_opt, dtype=np.float64).reshape(-1)
        self.d_ac = np.asarray(self.d_ac, dtype=np.float64).reshape(-1)
        if self.d_opt.shape != self.d_ac.shape:
            raise ValueError(f"depth pair arrays differ: {self.d_opt.shape} vs {self.d_ac.shape}")
        both = np.concatenate([self.d_opt, self.d_ac])
        if not (np.all(np.isfinite(both)) and np.all(both > 0)):
            raise ValueError("depth pairs must be positive and finite")

    def __len__(self) -> int:
        return int(self.d_opt.size)


class ScaleEstimate(NamedTuple):
    scale: float
    inliers: int


def filter_depth_pairs(d_opt: DepthImage, d_ac: DepthImage, conf: np.ndarray) -> DepthPairSet:
    """Pixels with valid optical and acoustic depth whose confidence is strictly above the image mean."""
    if not (d_opt.shape == d_ac.shape == conf.shape):
        raise ValueError(f"shapes differ: optical {d_opt.shape}, acoustic {d_ac.shape}, confidence {conf.shape}")
    keep = d_opt.valid & d_ac.valid & (conf > np.nanmean(conf))
    vs, us = np.nonzero(keep)
    return DepthPairSet(d_opt.depths[keep], d_ac.depths[keep], np.stack([us, vs], axis=1))


def ransac_scale(pairs: DepthPairSet, cfg: RansacConfig, rng: Optional[np.random.Generator] = None) -> ScaleEstimate:
    """Scale s with d_ac ~ s * d_opt.

    Each hypothesis is the ratio of one sampled pair; a pair is an inlier when
    |s * d_opt - d_ac| < epsilon_in. The result is the least-squares scale over
    the largest consensus set.
    """
    n = len(pairs)
    if n == 0:
        raise ScaleUnavailable("no usable optical/acoustic depth pairs")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    d_o, d_a = pairs.d_opt, pairs.d_ac
    picks = rng.integers(0, n, size=cfg.iterations)
    hypotheses = d_a[picks] / d_o[picks]

    best_count, best_scale = -1, float(hypotheses[0])
    block = max(1, _BLOCK_ELEMENTS // n)
    for start in range(0, hypotheses.size, block):
        s = hypotheses[start : start + block]
        counts = np.count_nonzero(np.abs(s[:, None] * d_o[None, :] - d_a[None, :]) < cfg.epsilon_in, axis=1)
        i = int(np.argmax(counts))
        if counts[i] > best_count:
            best_count, best_scale = int(counts[i]), float(s[i])

    inliers = np.abs(best_scale * d_o - d_a) < cfg.epsilon_in
    scale = float(np.dot(d_o[inliers], d_a[inliers]) / np.dot(d_o[inliers], d_o[inliers]))
    fraction = best_count / n
    if fraction < cfg.min_inlier_fraction:
        raise ScaleUnreliable(
            f"inlier fraction {fraction:.3f} below {cfg.min_inlier_fraction}", scale=scale, inlier_fraction=fraction
        )
    logger.debug("ransac scale %.5f with %d/%d inliers", scale, best_count, n)
    return ScaleEstimate(scale, best_count)


def apply_scale(pred: PointmapPrediction, s: float) -> PointmapPrediction:
    """Copy of `pred` with both pointmaps multiplied by `s`."""
    if not (np.isfinite(s) and s > 0):
        raise InvalidScaleError(f"scale must be positive and finite, got {s}")
    return replace(pred, X_ii=pred.X_ii * s, X_ij=pred.X_ij * s)


def refine_scale(pts_k: np.ndarray, pts_f: np.ndarray, T_kf: RigidTransform) -> float:
    """Minimizer of sum ||a - s * T_kf(b)||^2 over matched keyframe points a and frame points b."""
    a = np.asarray(pts_k, dtype=np.float64).reshape(-1, 3)
    b = T_kf.apply(np.asarray(pts_f, dtype=np.float64).reshape(-1, 3))
    if a.shape != b.shape:
        raise ValueError(f"matched point lists differ: {a.shape} vs {b.shape}")
    denom = float(np.sum(b * b))
    if a.size == 0 or denom == 0:
        raise DegenerateRefinement("no non-zero matched points to refine scale")
    return float(np.sum(a * b) / denom)
