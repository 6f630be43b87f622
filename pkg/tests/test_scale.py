import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from optiacoustic.config import RansacConfig
from optiacoustic.depth import DepthImage
from optiacoustic.errors import DegenerateRefinement, InvalidScaleError, ScaleUnavailable, ScaleUnreliable
from optiacoustic.geometry import RigidTransform
from optiacoustic.pointmap import PointmapPrediction
from optiacoustic.scale import DepthPairSet, apply_scale, filter_depth_pairs, ransac_scale, refine_scale


def _pairs_with_outliers(rng, scale=0.5, inliers=200, outliers=60) -> DepthPairSet:
    d_opt = rng.uniform(1.0, 3.0, inliers + outliers)
    d_ac = scale * d_opt + rng.normal(0.0, 0.005, d_opt.size)
    d_ac[inliers:] = rng.uniform(0.2, 3.0, outliers)
    return DepthPairSet(d_opt, d_ac)


def test_filter_keeps_pixels_strictly_above_mean_confidence():
    d_opt = DepthImage(np.array([[1.0, 1.0, np.nan, 1.0]]))
    d_ac = DepthImage(np.array([[0.5, np.nan, 0.5, 0.5]]))
    conf = np.array([[3.0, 5.0, 5.0, 1.0]])
    pairs = filter_depth_pairs(d_opt, d_ac, conf)
    # mean 3.5: only the first pixel has both depths, and 3.0 is not above it
    assert len(pairs) == 0
    conf = np.array([[4.0, 5.0, 5.0, 0.0]])
    pairs = filter_depth_pairs(d_opt, d_ac, conf)
    assert len(pairs) == 1
    np.testing.assert_array_equal(pairs.pixels, [[0, 0]])


def test_filter_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        filter_depth_pairs(DepthImage(np.ones((2, 2))), DepthImage(np.ones((2, 3))), np.ones((2, 2)))


def test_depth_pairs_must_be_positive():
    with pytest.raises(ValueError):
        DepthPairSet([1.0, 2.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        DepthPairSet([1.0], [1.0, 2.0])


def test_ransac_recovers_scale_despite_outliers(rng):
    pairs = _pairs_with_outliers(rng)
    est = ransac_scale(pairs, RansacConfig(), np.random.default_rng(0))
    assert est.scale == pytest.approx(0.5, abs=0.005)
    assert est.inliers >= 200


def test_ransac_is_deterministic_for_a_seeded_generator(rng):
    pairs = _pairs_with_outliers(rng)
    a = ransac_scale(pairs, RansacConfig(), np.random.default_rng(9))
    b = ransac_scale(pairs, RansacConfig(), np.random.default_rng(9))
    assert a == b


def test_ransac_without_pairs_is_unavailable():
    with pytest.raises(ScaleUnavailable):
        ransac_scale(DepthPairSet([], []), RansacConfig())


def test_weak_consensus_is_unreliable_but_reports_its_fit(rng):
    pairs = _pairs_with_outliers(rng)
    with pytest.raises(ScaleUnreliable) as info:
        ransac_scale(pairs, RansacConfig(min_inlier_fraction=0.9), np.random.default_rng(0))
    assert info.value.scale == pytest.approx(0.5, abs=0.01)
    assert 0.7 < info.value.inlier_fraction < 0.9


def _prediction(h=2, w=3) -> PointmapPrediction:
    pts = np.arange(h * w * 3, dtype=np.float64).reshape(h, w, 3) + 1.0
    ones = np.ones((h, w))
    feats = np.ones((h, w, 4))
    return PointmapPrediction(pts, pts + 1.0, ones, ones, feats, feats, ones, ones)


def test_apply_scale_scales_both_pointmaps_and_leaves_input_alone():
    pred = _prediction()
    scaled = apply_scale(pred, 0.25)
    np.testing.assert_allclose(scaled.X_ii, 0.25 * pred.X_ii)
    np.testing.assert_allclose(scaled.X_ij, 0.25 * pred.X_ij)
    assert scaled.C_i is pred.C_i
    assert pred.X_ii[0, 0, 0] == 1.0


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
def test_apply_scale_rejects_non_positive_scale(bad):
    with pytest.raises(InvalidScaleError):
        apply_scale(_prediction(), bad)


def test_refine_scale_closed_form(rng):
    t = RigidTransform.from_rotvec((0.1, -0.2, 0.05), (0.3, 0.0, -0.1))
    frame_pts = rng.normal(size=(50, 3))
    keyframe_pts = 1.07 * t.apply(frame_pts)
    assert refine_scale(keyframe_pts, frame_pts, t) == pytest.approx(1.07)
    # hand-computed: a = (2, 0, 0), b = (1, 0, 0), identity pose
    assert refine_scale([[2.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], RigidTransform.identity()) == pytest.approx(2.0)


def test_refine_scale_degenerate_inputs():
    with pytest.raises(DegenerateRefinement):
        refine_scale(np.zeros((0, 3)), np.zeros((0, 3)), RigidTransform.identity())
    with pytest.raises(DegenerateRefinement):
        refine_scale(np.ones((2, 3)), np.zeros((2, 3)), RigidTransform.identity())


@pytest.mark.parametrize("seed", range(50))
def test_ransac_inverts_injected_scale(seed):
    rng = np.random.default_rng(seed)
    injected = rng.uniform(0.25, 4.0)
    d_ac = rng.uniform(0.3, 1.5, 500)
    est = ransac_scale(DepthPairSet(d_ac * injected, d_ac), RansacConfig(), rng)
    assert est.scale == pytest.approx(1.0 / injected, rel=0.01)


def test_ransac_inverts_injected_scale_under_noise_and_outliers():
    rng = np.random.default_rng(77)
    recovered = 0
    for _ in range(50):
        injected = rng.uniform(0.25, 4.0)
        truth = rng.uniform(0.3, 1.5, 500)
        d_ac = truth + rng.normal(0.0, 0.02, truth.size)
        wild = rng.random(truth.size) < 0.2
        d_ac[wild] = rng.uniform(0.2, 3.0, int(wild.sum()))
        d_ac = np.clip(d_ac, 1e-3, None)
        est = ransac_scale(DepthPairSet(truth * injected, d_ac), RansacConfig(), rng)
        recovered += abs(est.scale * injected - 1.0) <= 0.1
    assert recovered >= 45


def test_refine_scale_matches_numeric_minimizer(rng):
    for _ in range(100):
        t = RigidTransform.from_rotvec(rng.normal(scale=0.3, size=3), rng.normal(size=3))
        b = rng.normal(size=(30, 3))
        a = rng.uniform(0.5, 2.0) * t.apply(b) + rng.normal(scale=0.05, size=(30, 3))
        tb = t.apply(b)
        res = minimize_scalar(lambda s: np.sum((a - s * tb) ** 2), bracket=(0.1, 3.0), method="golden", tol=1e-10)
        s_p = refine_scale(a, b, t)
        assert s_p == pytest.approx(res.x, rel=1e-6)
        h = 1e-6
        slope = (np.sum((a - (s_p + h) * tb) ** 2) - np.sum((a - (s_p - h) * tb) ** 2)) / (2 * h)
        assert abs(slope) < 1e-4 * np.sum(tb * tb)
