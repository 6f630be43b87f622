import numpy as np
import pytest

from conftest import GRID_LOWER, GRID_RES, GRID_SIZE, small_config_dict
from main import main
from optiacoustic.acoustic_map import OccupancyGrid, write_grid
from optiacoustic.config import config_from_dict, dump_config
from optiacoustic.dataset import read_ply
from optiacoustic.depth import read_depth
from optiacoustic.scene import single_box_scene, voxelize_surface


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A simulated dataset, its config file and a voxelized ground-truth grid."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "small.cfg"
    dump_config(config_from_dict(small_config_dict()), config)
    main(["simulate", "--out", str(root / "ds"), "--config", str(config)])
    grid = OccupancyGrid.from_bounds(GRID_LOWER, GRID_SIZE, GRID_RES)
    grid.occupancy = voxelize_surface(single_box_scene(), grid)
    write_grid(root / "truth.oavg", grid)
    return root


def _fails(argv, capsys) -> str:
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ")
    return err


def test_simulate_writes_dataset(workspace):
    ds = workspace / "ds"
    assert sorted(p.name for p in (ds / "frames").iterdir()) == [f"{i:06d}.png" for i in range(4)]
    assert len(list((ds / "sonar").iterdir())) == 3
    assert (ds / "config").exists() and (ds / "scene.json").exists()


def test_map_integrates_sonar_scans(workspace, capsys):
    out = workspace / "sonar.oavg"
    main(["map", str(workspace / "ds"), "--out", str(out)])
    stdout = capsys.readouterr().out
    assert f"Grid written to: {out}" in stdout
    assert "Occupied voxels:" in stdout
    assert out.exists()


def test_reconstruct_then_measure(workspace, capsys):
    cloud = workspace / "cloud.ply"
    main(["reconstruct", str(workspace / "ds"), str(workspace / "truth.oavg"), "--out", str(cloud)])
    stdout = capsys.readouterr().out
    assert f"Point cloud written to: {cloud}" in stdout
    points, colors = read_ply(cloud)
    assert len(points) > 0 and colors.shape == points.shape
    log = (workspace / "cloud.log").read_text().splitlines()
    assert log[-1].startswith("# summary frames=4 ")

    main(["measure", str(cloud), str(workspace / "ds")])
    report = capsys.readouterr().out
    assert report.startswith("box: measured=")


def test_reconstruct_is_byte_reproducible(workspace, capsys):
    outs = [workspace / f"repeat{k}.ply" for k in range(2)]
    for out in outs:
        main(["reconstruct", str(workspace / "ds"), str(workspace / "truth.oavg"), "--out", str(out), "--seed", "11"])
    capsys.readouterr()
    assert outs[0].read_bytes() == outs[1].read_bytes()


def test_graph_dump_prints_keyframes(workspace, capsys):
    main(["graph-dump", str(workspace / "ds"), str(workspace / "truth.oavg")])
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("keyframe 0 component 0 scale ")


def test_render_depth_from_look_at(workspace, capsys):
    out = workspace / "view.oadp"
    main([
        "render-depth", str(workspace / "truth.oavg"), "--out", str(out),
        "--config", str(workspace / "small.cfg"),
        "--look-at", "0", "-0.7", "0.6", "0", "0", "0.05",
    ])
    assert "Valid pixels:" in capsys.readouterr().out
    depth = read_depth(out)
    assert depth.shape == (48, 64)
    assert np.nanmin(depth.depths) > 0.5


def test_render_depth_rejects_unknown_frame(workspace, capsys):
    err = _fails([
        "render-depth", str(workspace / "truth.oavg"), "--out", str(workspace / "x.oadp"),
        "--poses", str(workspace / "ds" / "poses.txt"), "--frame", "99",
    ], capsys)
    assert "no pose for frame 99" in err


def test_reconstruct_with_empty_map_fails_to_initialize(workspace, capsys):
    empty = workspace / "empty.oavg"
    write_grid(empty, OccupancyGrid.from_bounds(GRID_LOWER, GRID_SIZE, GRID_RES))
    log = workspace / "empty.log"
    err = _fails([
        "reconstruct", str(workspace / "ds"), str(empty),
        "--out", str(workspace / "none.ply"), "--diagnostics", str(log),
    ], capsys)
    assert "initialization never succeeded" in err
    assert log.read_text().splitlines()[-1].startswith("# summary frames=4 keyframes=0")
    assert not (workspace / "none.ply").exists()


def test_bad_inputs_exit_with_error(tmp_path, capsys):
    _fails(["simulate", "--out", str(tmp_path / "x"), "--scene", "reef"], capsys)
    _fails(["map", str(tmp_path / "missing")], capsys)
    _fails(["measure", str(tmp_path / "missing.ply"), str(tmp_path)], capsys)
