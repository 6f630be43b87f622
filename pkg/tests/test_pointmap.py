import numpy as np
import pytest

from optiacoustic.config import OracleConfig
from optiacoustic.errors import FormatError, PredictorInputError
from optiacoustic.geometry import PinholeCamera, relative_pose
from optiacoustic.pointmap import (
    Frame,
    MatchSet,
    OracleProvider,
    PointmapProvider,
    match_projective,
    optical_depth,
    predict,
    read_prediction,
    surface_features,
    write_prediction,
)
from optiacoustic.scale import apply_scale
from optiacoustic.scene import TurbidityModel, raycast


def test_oracle_satisfies_provider_protocol(oracle):
    assert isinstance(oracle, PointmapProvider)


def test_self_prediction_is_scaled_ground_truth(oracle, make_frame, box_scene):
    frame = make_frame(0)
    pred = predict(oracle, frame, frame)
    truth, _ = raycast(box_scene, frame.camera, frame.pose)
    np.testing.assert_allclose(optical_depth(pred).depths, 2.0 * truth.depths)
    np.testing.assert_allclose(pred.X_ij, pred.X_ii)
    assert pred.feature_dim == 16
    assert np.all((pred.Q_i >= 0) & (pred.Q_i <= 1))


def test_cross_prediction_lives_in_frame_i(oracle, make_frame):
    fi = make_frame(0)
    fj = make_frame(1, eye=(0.1, -0.7, 0.6))
    pred = oracle.predict_pair(fi, fj)
    world_i = fi.pose.apply(pred.X_ij / 2.0)
    j_only = oracle.predict_pair(fj, fj)
    world_j = fj.pose.apply(j_only.X_ii / 2.0)
    np.testing.assert_allclose(world_i, world_j, atol=1e-9)


def test_oracle_is_deterministic_per_pair(box_scene, make_frame):
    cfg = OracleConfig(noise_sigma=0.01, outlier_fraction=0.1)
    a = OracleProvider(box_scene, cfg, seed=3)
    b = OracleProvider(box_scene, cfg, seed=3)
    f0, f1 = make_frame(0), make_frame(1, eye=(0.05, -0.7, 0.6))
    np.testing.assert_array_equal(a.predict_pair(f0, f1).X_ii, b.predict_pair(f0, f1).X_ii)
    assert not np.allclose(a.predict_pair(f0, f1).X_ii, a.predict_pair(f1, f0).X_ii, equal_nan=True)


def test_turbidity_lowers_oracle_confidence(box_scene, make_frame):
    frame = make_frame(0)
    clear = OracleProvider(box_scene).predict_pair(frame, frame)
    murky = OracleProvider(box_scene, turbidity=TurbidityModel(ntu=4.0)).predict_pair(frame, frame)
    assert murky.mean_conf() < clear.mean_conf()


def test_predict_rejects_mismatched_or_oversized_inputs(oracle, make_frame):
    frame = make_frame(0)
    other_cam = PinholeCamera(100.0, 100.0, 15.5, 11.5, 32, 24)
    small = Frame(1, np.zeros((24, 32, 3), dtype=np.uint8), frame.pose, other_cam)
    with pytest.raises(PredictorInputError):
        predict(oracle, frame, small)
    big_cam = PinholeCamera(500.0, 500.0, 319.5, 239.5, 640, 480)
    big = Frame(2, np.zeros((480, 640, 3), dtype=np.uint8), frame.pose, big_cam)
    with pytest.raises(PredictorInputError):
        predict(oracle, big, big)


def test_frame_validates_image_against_camera(camera, make_frame):
    pose = make_frame(0).pose
    with pytest.raises(ValueError):
        Frame(0, np.zeros((10, 10, 3), dtype=np.uint8), pose, camera)


def test_surface_features_are_smooth_and_distinctive():
    p = np.array([[0.1234, 0.2057, 0.3161]])
    near = surface_features(np.vstack([p, p + 0.0002]), 16)
    far = surface_features(np.vstack([p, p + 0.5]), 16)

    def cos(a, b):
        return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))

    assert cos(near[0], near[1]) > 0.95
    assert abs(cos(far[0], far[1])) < 0.9
    np.testing.assert_array_equal(surface_features(p, 16), surface_features(p, 16))


def test_projective_matching_recovers_true_correspondences(oracle, make_frame, make_keyframe):
    kf = make_keyframe(0)
    frame = make_frame(1, eye=(0.02, -0.7, 0.6))
    pred = apply_scale(oracle.predict_pair(frame, kf.frame), 0.5)
    t_kf = relative_pose(kf.pose, frame.pose)
    matches = match_projective(pred, kf, t_kf, delta_depth=0.075, rho_feat=0.5)
    assert len(matches) > 0.5 * 64 * 48
    # matched points agree in the world within a pixel footprint
    a = kf.pose.apply(kf.pointmap[matches.keyframe_pixels[:, 1], matches.keyframe_pixels[:, 0]])
    b = frame.pose.apply(pred.X_ii[matches.frame_pixels[:, 1], matches.frame_pixels[:, 0]])
    assert np.median(np.linalg.norm(a - b, axis=1)) < 0.01
    # row-major frame pixel order
    order = matches.frame_pixels[:, 1] * 64 + matches.frame_pixels[:, 0]
    assert np.all(np.diff(order) > 0)


def test_projective_matching_rejects_wrong_depths(oracle, make_frame, make_keyframe):
    kf = make_keyframe(0)
    frame = make_frame(1, eye=(0.02, -0.7, 0.6))
    # left at the arbitrary predictor scale, depths disagree with the keyframe
    pred = oracle.predict_pair(frame, kf.frame)
    assert len(match_projective(pred, kf, relative_pose(kf.pose, frame.pose))) == 0


def test_match_set_requires_equal_lengths():
    with pytest.raises(ValueError):
        MatchSet(np.zeros((2, 2)), np.zeros((3, 2)))
    assert len(MatchSet()) == 0


def test_prediction_file_round_trip(tmp_path, oracle, make_frame):
    frame = make_frame(0)
    pred = oracle.predict_pair(frame, frame)
    path = tmp_path / "0_0.oapm"
    write_prediction(path, pred)
    back = read_prediction(path)
    np.testing.assert_allclose(back.X_ii, pred.X_ii, rtol=1e-6)
    np.testing.assert_allclose(back.D_j, pred.D_j, rtol=1e-6, atol=1e-7)
    assert back.shape == pred.shape


def test_corrupt_prediction_file_is_rejected(tmp_path):
    path = tmp_path / "bad.oapm"
    path.write_bytes(b"OAPM" + bytes(12))
    with pytest.raises(FormatError):
        read_prediction(path)
