"""CLI entry point for simulation, acoustic mapping and metric reconstruction.

Typical session:

    python src/main.py simulate --out data/clear
    python src/main.py map data/clear --out data/clear/grid.oavg
    python src/main.py reconstruct data/clear data/clear/grid.oavg --out cloud.ply
    python src/main.py measure cloud.ply data/clear
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from optiacoustic import workflows
from optiacoustic.config import with_overrides
from optiacoustic.errors import OptiAcousticError
from optiacoustic.geometry import RigidTransform, look_at, read_poses
from optiacoustic.measure import format_report


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Key-value config file.")
    common.add_argument("--seed", type=int, default=None, help="Master random seed (overrides the config).")
    common.add_argument("--verbose", action="store_true", help="Debug logging.")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Opti-acoustic metric 3D reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("simulate", parents=[common], help="Write a synthetic dataset.")
    p.add_argument("--out", type=Path, required=True, help="Dataset directory to create.")
    p.add_argument("--scene", default=None, help="Scene preset: default, single_box, two_clusters, empty.")
    p.add_argument("--frames", type=int, default=None, help="Camera frames on the object-centric trajectory.")
    p.add_argument("--scans", type=int, default=None, help="Sonar scans on the sweep trajectory.")
    p.add_argument("--ntu", type=float, default=None, help="Water turbidity in NTU.")
    p.add_argument("--raw", action="store_true", help="Store frames as raw RGB instead of PNG.")

    p = sub.add_parser("map", parents=[common], help="Build the acoustic occupancy grid from sonar scans.")
    p.add_argument("dataset", type=Path)
    p.add_argument("--out", type=Path, default=None, help="Grid file (default: <dataset>/grid.oavg).")

    p = sub.add_parser("reconstruct", parents=[common], help="Run the reconstruction pipeline.")
    p.add_argument("dataset", type=Path)
    p.add_argument("grid", type=Path)
    p.add_argument("--out", type=Path, default=Path("cloud.ply"), help="Output PLY point cloud.")
    p.add_argument("--diagnostics", type=Path, default=None, help="Per-frame diagnostics log (default: <out>.log).")
    p.add_argument("--realtime", action="store_true", help="Drop stale frames instead of replaying every frame.")
    p.add_argument("--full-optimize", action="store_true", help="Optimize every component on keyframe insertion.")

    p = sub.add_parser("measure", parents=[common], help="Measure object sizes in a point cloud.")
    p.add_argument("cloud", type=Path)
    p.add_argument("objects", type=Path, help="Dataset directory or scene JSON with ground-truth objects.")
    p.add_argument("--inflate", type=float, default=0.2, help="Crop box inflation factor.")
    p.add_argument("--floor-clearance", type=float, default=0.02, help="Drop points this close to the floor.")

    p = sub.add_parser("render-depth", parents=[common], help="Render the acoustic depth image for a pose.")
    p.add_argument("grid", type=Path)
    p.add_argument("--out", type=Path, required=True, help="Output depth file.")
    pose = p.add_mutually_exclusive_group(required=True)
    pose.add_argument("--poses", type=Path, help="Pose file; pick one entry with --frame.")
    pose.add_argument("--look-at", type=float, nargs=6, metavar=("EX", "EY", "EZ", "TX", "TY", "TZ"))
    p.add_argument("--frame", type=int, default=0)

    p = sub.add_parser("graph-dump", parents=[common], help="Reconstruct and print the keyframe graph.")
    p.add_argument("dataset", type=Path)
    p.add_argument("grid", type=Path)
    p.add_argument("--out", type=Path, default=None, help="Write the dump here instead of stdout.")
    return parser


def _cmd_simulate(args: argparse.Namespace) -> None:
    cfg = workflows.resolve_config(args.config, seed=args.seed)
    sim = {}
    if args.scene is not None:
        sim["scene"] = args.scene
    if args.frames is not None:
        sim["n_frames"] = args.frames
    if args.scans is not None:
        sim["sweep_scans"] = args.scans
    if args.raw:
        sim["image_format"] = "raw"
    overrides = {"simulation": sim}
    if args.ntu is not None:
        overrides["turbidity"] = {"ntu": args.ntu}
    cfg = with_overrides(cfg, **overrides)
    manifest = workflows.simulate(cfg, args.out)
    print("Dataset written to:", args.out)
    print("Frames:", manifest.frame_count)
    print("Sonar scans:", manifest.scan_count)
    print("Turbidity (NTU):", manifest.ntu)


def _cmd_map(args: argparse.Namespace) -> None:
    cfg = workflows.resolve_config(args.config, args.dataset, args.seed)
    out = args.out or args.dataset / "grid.oavg"
    result = workflows.build_map(args.dataset, out, cfg)
    print("Grid written to:", result.path)
    print("Occupied voxels:", result.grid.occupied_count())
    print("Sweep coverage:", round(result.coverage, 4))


def _cmd_reconstruct(args: argparse.Namespace) -> None:
    cfg = workflows.resolve_config(args.config, args.dataset, args.seed)
    cfg = cfg.copy(update={
        "realtime": args.realtime or cfg.realtime,
        "full_optimize": args.full_optimize or cfg.full_optimize,
    })
    diagnostics = args.diagnostics or args.out.with_suffix(".log")
    result = workflows.reconstruct(args.dataset, args.grid, args.out, diagnostics, cfg)
    summary = result.state.summary()
    print("Point cloud written to:", result.ply_path, f"({len(result.cloud)} points)")
    print("Diagnostics:", result.diagnostics_path)
    print("Keyframes:", summary["keyframes"])
    print("Recovery episodes:", summary["recovery_episodes"])
    print("Skipped frames:", summary["skipped"])


def _cmd_measure(args: argparse.Namespace) -> None:
    results = workflows.measure(args.cloud, args.objects, args.inflate, args.floor_clearance)
    sys.stdout.write(format_report(results))


def _pose_from_args(args: argparse.Namespace) -> RigidTransform:
    if args.look_at is not None:
        return look_at(args.look_at[:3], args.look_at[3:])
    poses = read_poses(args.poses)
    if args.frame not in poses:
        raise OptiAcousticError(f"{args.poses}: no pose for frame {args.frame}")
    return poses[args.frame]


def _cmd_render_depth(args: argparse.Namespace) -> None:
    cfg = workflows.resolve_config(args.config, seed=args.seed)
    depth = workflows.render_depth_at(args.grid, _pose_from_args(args), cfg, args.out)
    print("Depth image written to:", args.out)
    print("Valid pixels:", round(depth.valid_fraction(), 4))


def _cmd_graph_dump(args: argparse.Namespace) -> None:
    cfg = workflows.resolve_config(args.config, args.dataset, args.seed)
    result = workflows.reconstruct(args.dataset, args.grid, cfg=cfg)
    text = result.state.graph.dump()
    if args.out:
        args.out.write_text(text)
        print("Graph written to:", args.out)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "simulate": _cmd_simulate,
    "map": _cmd_map,
    "reconstruct": _cmd_reconstruct,
    "measure": _cmd_measure,
    "render-depth": _cmd_render_depth,
    "graph-dump": _cmd_graph_dump,
}


def main(argv: Optional[List[str]] = None) -> None:
    """Parse CLI args and dispatch to the chosen command."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        COMMANDS[args.command](args)
    except (OptiAcousticError, OSError) as exc:
        # Non-zero exit so scripted runs notice the failure
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(1)


if __name__ == "__main__":
    main()
