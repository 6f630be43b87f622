import math

import numpy as np
import pytest

from optiacoustic.acoustic_map import OccupancyGrid
from optiacoustic.depth import DepthImage
from optiacoustic.geometry import RigidTransform, look_at
from optiacoustic.scene import (
    SCENES,
    Scene,
    SceneObject,
    SonarGeometry,
    TrajectoryKind,
    TrajectoryParams,
    TurbidityModel,
    apply_haze,
    attenuate_confidence,
    camera_points,
    gen_trajectory,
    make_scene,
    raycast,
    simulate_sonar,
    standoff,
    voxelize_surface,
)


def _rays_down(xy):
    origins = np.array([[x, y, 2.0] for x, y in xy])
    dirs = np.tile([0.0, 0.0, -1.0], (len(xy), 1))
    return origins, dirs


@pytest.mark.parametrize(
    "kind,size,top",
    [("box", (0.2, 0.2, 0.4), 0.2), ("cylinder", (0.1, 0.3), 0.15), ("sphere", (0.5,), 0.25)],
)
def test_primitive_intersection_hits_top_surface(kind, size, top):
    obj = SceneObject("o", kind, RigidTransform.identity(), size)
    origins, dirs = _rays_down([(0.0, 0.0), (1.0, 1.0)])
    t = obj.intersect(origins, dirs)
    assert t[0] == pytest.approx(2.0 - top)
    assert np.isnan(t[1])


def test_intersection_from_inside_returns_exit_distance():
    obj = SceneObject("o", "box", RigidTransform.identity(), (1.0, 1.0, 1.0))
    t = obj.intersect(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]))
    assert t[0] == pytest.approx(0.5)


def test_rotated_box_uses_its_pose():
    pose = RigidTransform.from_axis_angle((0, 0, 1), math.pi / 4, (0.0, 0.0, 0.0))
    obj = SceneObject("o", "box", pose, (0.2, 0.2, 0.2))
    t = obj.intersect(np.array([[1.0, 0.0, 0.0]]), np.array([[-1.0, 0.0, 0.0]]))
    assert t[0] == pytest.approx(1.0 - 0.1 * math.sqrt(2))


def test_invalid_primitives_are_rejected():
    with pytest.raises(ValueError):
        SceneObject("o", "cone", RigidTransform.identity(), (1.0,))
    with pytest.raises(ValueError):
        SceneObject("o", "box", RigidTransform.identity(), (1.0, 1.0))
    with pytest.raises(ValueError):
        SceneObject("o", "sphere", RigidTransform.identity(), (0.0,))


def test_scene_reports_floor_object_and_miss():
    scene = make_scene("single_box")
    origins, dirs = _rays_down([(0.0, 0.0), (0.4, 0.4)])
    t, which = scene.intersect(origins, dirs)
    assert which.tolist() == [0, -1]
    np.testing.assert_allclose(t, [1.8, 2.0])
    _, which = Scene([], floor_height=None).intersect(origins, dirs)
    assert which.tolist() == [-2, -2]


def test_signed_distance_is_zero_on_surfaces():
    scene = make_scene("single_box")
    pts = np.array([[0.0, 0.0, 0.2], [0.1, 0.0, 0.1], [0.5, 0.5, 0.0], [0.5, 0.5, 0.3]])
    np.testing.assert_allclose(scene.signed_distance(pts), [0.0, 0.0, 0.0, 0.3], atol=1e-12)


def test_scene_dict_round_trip():
    scene = make_scene("default")
    back = Scene.from_dict(scene.to_dict())
    assert [o.name for o in back.objects] == [o.name for o in scene.objects]
    for a, b in zip(scene.objects, back.objects):
        np.testing.assert_allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-9)
        assert a.size == b.size
        assert a.ground_truth_size() == b.ground_truth_size()


def test_presets_rest_on_the_floor():
    for name in SCENES:
        scene = make_scene(name)
        for obj in scene.objects:
            assert obj.center[2] - obj.half_extents()[2] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        make_scene("reef")


def test_raycast_depth_is_ray_length(camera):
    scene = Scene([], floor_height=0.0)
    pose = look_at((0.0, 0.0, 1.0), (0.0, 0.0, 0.0))
    depth, rgb = raycast(scene, camera, pose)
    assert depth.valid.all()
    pts = pose.apply(camera_points(depth, camera).reshape(-1, 3))
    np.testing.assert_allclose(pts[:, 2], 0.0, atol=1e-12)
    assert rgb.dtype == np.uint8 and rgb.shape == (48, 64, 3)
    assert tuple(rgb[0, 0]) == scene.floor_color


def test_turbidity_lowers_confidence_with_range():
    model = TurbidityModel(ntu=2.0, beta=0.25)
    depth = DepthImage(np.array([[0.5, 1.0, np.nan]]))
    conf = attenuate_confidence(np.full((1, 3), 4.0), depth, model)
    assert conf[0, 0] > conf[0, 1] > 0
    assert conf[0, 2] == 0.0
    assert conf[0, 1] == pytest.approx(4.0 * math.exp(-0.5))
    clear = attenuate_confidence(np.full((1, 3), 4.0), depth, TurbidityModel())
    np.testing.assert_allclose(clear[0, :2], 4.0)


def test_haze_blends_towards_water_color():
    img = np.zeros((1, 2, 3), dtype=np.uint8)
    depth = DepthImage(np.array([[0.1, 100.0]]))
    hazy = apply_haze(img, depth, TurbidityModel(ntu=5.0), water=(100, 100, 100))
    assert hazy[0, 0, 0] < hazy[0, 1, 0]
    assert hazy[0, 1, 0] == 100


def test_simulated_sonar_bins_the_floor_return():
    scene = Scene([], floor_height=0.0)
    pose = look_at((0.0, -1.0, 1.0), (0.0, 0.0, 0.0))
    params = SonarGeometry(beam_count=8, bin_count=50, max_range=6.0, elevation_rays=4)
    scan = simulate_sonar(scene, pose, params)
    assert scan.intensities.shape == (8, 50)
    assert scan.intensities.max() > 0
    # every ray of every beam hits the floor within range
    np.testing.assert_allclose(scan.intensities.sum(axis=1), params.gain)
    first = np.argmax(scan.intensities > 0, axis=1)
    # central beams look more steeply down than the edges of the fan
    assert first[3] < first[0] and first[4] < first[7]


def test_voxelize_surface_marks_box_shell(box_scene):
    grid = OccupancyGrid.from_bounds((-0.5125, -0.5125, -0.1125), (1.025, 1.025, 0.45), 0.025)
    mask = voxelize_surface(box_scene, grid)
    centers = grid.index_to_world_center(np.argwhere(mask))
    assert np.all(box_scene.signed_distance(centers) <= 0.0125 + 1e-9)
    top = grid.world_to_index(np.array([0.0, 0.0, 0.2]))
    inside = grid.world_to_index(np.array([0.0, 0.0, 0.1]))
    assert mask[tuple(top)]
    assert not mask[tuple(inside)]


def test_sweep_keeps_standoff_and_looks_at_scene():
    scene = make_scene("default")
    params = TrajectoryParams(sweep_radius=0.3, min_standoff=0.5)
    poses = gen_trajectory(TrajectoryKind.SWEEP, scene, 12, params)
    assert len(poses) == 12
    for pose in poses:
        assert standoff(pose.translation, scene) >= 0.5
    rolls = [pose.rotation[2, 0] for pose in poses]
    assert max(rolls) - min(rolls) > 0.1


def test_object_centric_starts_stowed_and_visits_every_object():
    scene = make_scene("default")
    params = TrajectoryParams()
    poses = gen_trajectory("object_centric", scene, 60, params)
    np.testing.assert_allclose(poses[0].translation, scene.center() + np.asarray(params.stow_offset))
    eyes = np.array([p.translation for p in poses])
    for obj in scene.objects:
        assert np.min(np.linalg.norm(eyes - obj.center, axis=1)) < params.approach_near + 0.15


def test_single_frame_trajectory_is_the_stowed_pose():
    scene = make_scene("default")
    (pose,) = gen_trajectory(TrajectoryKind.OBJECT_CENTRIC, scene, 1)
    np.testing.assert_allclose(pose.translation, scene.center() + np.asarray(TrajectoryParams().stow_offset))
    with pytest.raises(ValueError):
        gen_trajectory(TrajectoryKind.SWEEP, scene, 0)
