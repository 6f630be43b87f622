import numpy as np
import pytest

from optiacoustic.errors import FormatError, InvalidPoseError
from optiacoustic.geometry import (
    PinholeCamera,
    RigidTransform,
    fit_to_max_dim,
    look_at,
    read_poses,
    relative_pose,
    rescale_camera,
    rotation_angle,
    write_poses,
)


def test_compose_applies_right_operand_first():
    a = RigidTransform.from_axis_angle((0, 0, 1), np.pi / 2, (1.0, 0.0, 0.0))
    b = RigidTransform(translation=(0.0, 2.0, 0.0))
    p = np.array([0.5, 0.0, 0.0])
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)))
    np.testing.assert_allclose((a @ b).matrix(), a.matrix() @ b.matrix())


def test_inverse_round_trips_points():
    t = RigidTransform.from_rotvec((0.1, -0.4, 0.3), (0.2, 0.5, -1.0))
    pts = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-12)


def test_relative_pose_maps_b_into_a():
    t_wa = look_at((0, -1, 1), (0, 0, 0))
    t_wb = look_at((0.3, -1, 1), (0, 0, 0))
    t_ab = relative_pose(t_wa, t_wb)
    p_b = np.array([0.0, 0.1, 1.2])
    np.testing.assert_allclose(t_wa.apply(t_ab.apply(p_b)), t_wb.apply(p_b), atol=1e-12)


def test_non_orthonormal_rotation_is_rejected():
    with pytest.raises(InvalidPoseError):
        RigidTransform(np.diag([1.0, 1.0, 2.0]), np.zeros(3))
    with pytest.raises(InvalidPoseError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InvalidPoseError):
        RigidTransform(np.eye(3), (np.nan, 0.0, 0.0))


def test_slightly_drifted_rotation_is_reorthonormalized():
    r = RigidTransform.from_rotvec((0.2, 0.1, 0.0)).rotation + 1e-6
    t = RigidTransform(r, np.zeros(3))
    np.testing.assert_allclose(t.rotation.T @ t.rotation, np.eye(3), atol=1e-12)


def test_quaternion_has_non_negative_w():
    t = RigidTransform.from_axis_angle((1, 0, 0), 3.0)
    assert t.quaternion()[3] >= 0
    back = RigidTransform.from_quaternion(-t.quaternion(), t.translation)
    np.testing.assert_allclose(back.rotation, t.rotation, atol=1e-12)


def test_backproject_and_project_agree(camera):
    p = camera.backproject(10, 40, 1.5)
    assert np.linalg.norm(p) == pytest.approx(1.5)
    uv, front = camera.project(p)
    assert front
    np.testing.assert_allclose(uv, [10, 40], atol=1e-9)


def test_backproject_rejects_bad_input(camera):
    with pytest.raises(ValueError):
        camera.backproject(64, 0, 1.0)
    with pytest.raises(ValueError):
        camera.backproject(0, 0, 0.0)


@pytest.mark.parametrize("stride", [1, 3, 4])
def test_strided_camera_keeps_pixel_rays(camera, stride):
    sub = camera.strided(stride)
    assert sub.shape == (-(-48 // stride), -(-64 // stride))
    np.testing.assert_allclose(sub.ray_directions(), camera.ray_directions()[::stride, ::stride], atol=1e-12)
    with pytest.raises(ValueError):
        camera.strided(0)


def test_camera_rejects_principal_point_outside_image():
    with pytest.raises(ValueError):
        PinholeCamera(100.0, 100.0, 70.0, 10.0, 64, 48)


def test_ray_directions_are_unit_and_central_ray_is_optical_axis():
    cam = PinholeCamera(50.0, 50.0, 2.0, 1.0, 5, 3)
    rays = cam.ray_directions()
    assert rays.shape == (3, 5, 3)
    np.testing.assert_allclose(np.linalg.norm(rays, axis=-1), 1.0)
    np.testing.assert_allclose(rays[1, 2], [0, 0, 1])


def test_rescale_camera_scales_intrinsics():
    cam = PinholeCamera(500.0, 500.0, 319.5, 239.5, 640, 480)
    w, h = fit_to_max_dim(640, 480, 512)
    assert (w, h) == (512, 384)
    small = rescale_camera(cam, w, h)
    assert small.fx == pytest.approx(400.0)
    assert small.cx == pytest.approx(255.6)
    assert fit_to_max_dim(320, 240, 512) == (320, 240)


def test_look_at_points_optical_axis_at_target():
    eye, target = np.array([0.5, -1.0, 0.8]), np.array([0.0, 0.1, 0.0])
    pose = look_at(eye, target)
    axis = pose.rotation[:, 2]
    np.testing.assert_allclose(axis, (target - eye) / np.linalg.norm(target - eye), atol=1e-12)
    # image "down" points towards world -z
    assert pose.rotation[2, 1] < 0


def test_look_at_straight_down_is_well_defined():
    pose = look_at((0, 0, 1), (0, 0, 0))
    np.testing.assert_allclose(pose.rotation[:, 2], [0, 0, -1], atol=1e-12)


def test_pose_file_round_trip(tmp_path):
    poses = {0: look_at((0, -1, 1), (0, 0, 0)), 3: RigidTransform.from_rotvec((0.1, 0.2, 0.3), (1, 2, 3))}
    path = tmp_path / "poses.txt"
    write_poses(path, poses)
    back = read_poses(path)
    assert sorted(back) == [0, 3]
    for k in poses:
        assert rotation_angle(back[k], poses[k]) < 1e-6
        np.testing.assert_allclose(back[k].translation, poses[k].translation, atol=1e-9)


def test_malformed_pose_file_raises(tmp_path):
    path = tmp_path / "poses.txt"
    path.write_text("0 1 2 3\n")
    with pytest.raises(FormatError):
        read_poses(path)
