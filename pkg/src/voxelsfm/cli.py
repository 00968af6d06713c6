"""Command-line driver.

Subcommands: sim (generate a synthetic dataset), run (full pipeline),
register / ba / loop / fuse (single stages on intermediate artifacts),
eval (trajectory metrics). Exit codes: 0 success, 2 config error, 3 stage
failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import yaml

from .config import dump_default_config, load_config
from .errors import ConfigError, StageError, VoxelSfmError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="voxelsfm",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("sim", help="generate a synthetic dataset")
    p_sim.add_argument("out_dir")
    p_sim.add_argument("--scene", help="scene YAML; defaults to the box room")
    p_sim.add_argument("--frames", type=int, default=40)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--range-noise", type=float, default=0.01)

    p_run = sub.add_parser("run", help="run the full pipeline")
    p_run.add_argument("config", nargs="?")
    p_run.add_argument("--dump-config", action="store_true",
                       help="print the default configuration and exit")

    p_reg = sub.add_parser("register", help="register one LiDAR frame "
                                            "against a map built from a trajectory")
    p_reg.add_argument("config")
    p_reg.add_argument("--frame", type=int, required=True)
    p_reg.add_argument("--trajectory", required=True,
                       help="TUM trajectory providing map poses and the init")

    p_ba = sub.add_parser("ba", help="joint adjustment over artifacts")
    p_ba.add_argument("config")
    p_ba.add_argument("--trajectory", required=True)
    p_ba.add_argument("--out", required=True)

    p_loop = sub.add_parser("loop", help="drift detection + pose graph on artifacts")
    p_loop.add_argument("config")
    p_loop.add_argument("--trajectory", required=True)
    p_loop.add_argument("--out", required=True)

    p_fuse = sub.add_parser("fuse", help="fuse scans along a trajectory")
    p_fuse.add_argument("config")
    p_fuse.add_argument("--trajectory", required=True)
    p_fuse.add_argument("--out", required=True)

    p_eval = sub.add_parser("eval", help="APE/RPE between trajectory files")
    p_eval.add_argument("estimate")
    p_eval.add_argument("ground_truth")
    p_eval.add_argument("--format", default="tum", choices=["tum", "kitti"])
    p_eval.add_argument("--no-align", action="store_true")
    p_eval.add_argument("--rpe-delta", type=int, default=1)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StageError, VoxelSfmError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def _dispatch(args) -> int:
    if args.command == "sim":
        return _cmd_sim(args)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "register":
        return _cmd_register(args)
    if args.command == "ba":
        return _cmd_ba(args)
    if args.command == "loop":
        return _cmd_loop(args)
    if args.command == "fuse":
        return _cmd_fuse(args)
    if args.command == "eval":
        return _cmd_eval(args)
    raise ConfigError(f"unknown command {args.command}")


def _cmd_sim(args) -> int:
    from .pipeline import generate_scene_artifacts
    from .sim import SceneSpec, default_room_scene

    if args.scene:
        with open(args.scene, "r", encoding="utf-8") as f:
            scene = SceneSpec.from_dict(yaml.safe_load(f))
    else:
        scene = default_room_scene()
    scene.n_frames = args.frames
    scene.seed = args.seed
    scene.sensor.range_noise = args.range_noise
    config_path = generate_scene_artifacts(scene, args.out_dir)
    print(config_path)
    return 0


def _cmd_run(args) -> int:
    if args.dump_config:
        print(dump_default_config(), end="")
        return 0
    if not args.config:
        raise ConfigError("a config file is required (or use --dump-config)")
    from .pipeline import run_pipeline

    config = load_config(args.config)
    state, artifacts = run_pipeline(config)
    for line in state.log_lines:
        print(line)
    if artifacts.get("metrics") is not None:
        for line in artifacts["metrics"].lines():
            print(line)
    print(artifacts["lidar_trajectory"])
    return 0


def _load_posed_scans(config, trajectory_path):
    from . import formats
    from .pipeline import load_inputs

    state = load_inputs(config)
    poses = formats.read_trajectory(trajectory_path, "tum")
    lidar_ids = sorted(state.lidar_frames)
    scans = {}
    for pose in poses:
        best = min(lidar_ids, key=lambda j: abs(
            state.lidar_frames[j].timestamp - (pose.timestamp or 0.0)))
        if abs(state.lidar_frames[best].timestamp - (pose.timestamp or 0.0)) < 1e-6:
            scans[best] = pose
    return state, scans


def _cmd_register(args) -> int:
    from .registration import register_lidar_frame

    config = load_config(args.config)
    state, posed = _load_posed_scans(config, args.trajectory)
    if args.frame not in state.lidar_frames:
        raise ConfigError(f"frame {args.frame} not among loaded LiDAR frames")
    for j, pose in sorted(posed.items()):
        if j != args.frame:
            state.vmap.insert_frame(pose.apply(state.lidar_frames[j].points),
                                    state.lidar_frames[j].intensities, j)
    init = posed.get(args.frame)
    if init is None:
        raise ConfigError("the trajectory does not cover the requested frame")
    res = register_lidar_frame(state.lidar_frames[args.frame], init,
                               state.vmap, config.registration)
    t = res.pose.translation
    print("pose: t=(%.6f %.6f %.6f) cost=%.6g inliers=%.3f iters=%d converged=%d"
          % (t[0], t[1], t[2], res.final_cost, res.inlier_fraction,
             res.iterations, int(res.converged)))
    return 0


def _cmd_ba(args) -> int:
    from . import formats
    from .bundle import LidarBlock, BundleProblem, joint_ba

    config = load_config(args.config)
    state, posed = _load_posed_scans(config, args.trajectory)
    blocks = []
    for k, (j, pose) in enumerate(sorted(posed.items())):
        frame = state.lidar_frames[j]
        state.vmap.insert_frame(pose.apply(frame.points), frame.intensities, k)
        blocks.append(LidarBlock(j, k, frame.points, frame.intensities, pose))
    problem = BundleProblem(cameras={}, map_points={}, lidar=blocks,
                            vmap=state.vmap,
                            fixed_lidar={blocks[0].frame_index} if blocks else set())
    report = joint_ba(problem, config.ba)
    out = [b.pose.with_timestamp(state.lidar_frames[b.frame_index].timestamp)
           for b in blocks]
    formats.write_trajectory(args.out, out, "tum")
    print("E %.6g -> %.6g (%d iters)" % (report.initial_energy,
                                         report.final_energy, report.iterations))
    return 0


def _cmd_loop(args) -> int:
    from . import formats
    from .loopclosure import (DriftThresholds, GraphBuildState,
                              build_pose_graph, detect_lidar_drift,
                              optimize_pose_graph)

    config = load_config(args.config)
    state, posed = _load_posed_scans(config, args.trajectory)
    thresholds = DriftThresholds.profile(config.drift_profile)
    for j, pose in sorted(posed.items()):
        frame = state.lidar_frames[j]
        state.vmap.insert_frame(pose.apply(frame.points), frame.intensities, j)
    lids = sorted(posed)
    window = [posed[j].with_timestamp(state.lidar_frames[j].timestamp)
              for j in lids]
    pairs = [(lids[k - 1], lids[k]) for k in range(4, len(lids))
             if detect_lidar_drift(window[k - 4:k + 1], thresholds)]
    gstate = GraphBuildState(visual_frames={}, map_points={},
                             lidar_scans={j: (state.lidar_frames[j], posed[j])
                                          for j in lids},
                             vmap=state.vmap, reg_opts=config.registration)
    graph = build_pose_graph(gstate, (), pairs)
    optimized = optimize_pose_graph(graph, anchors=[("l", lids[0])])
    out = [optimized[("l", j)].with_timestamp(state.lidar_frames[j].timestamp)
           for j in lids]
    formats.write_trajectory(args.out, out, "tum")
    print(f"{len(pairs)} drift pairs")
    return 0


def _cmd_fuse(args) -> int:
    from .fusion import colorize_and_fuse, grid_downsample, write_ply

    config = load_config(args.config)
    state, posed = _load_posed_scans(config, args.trajectory)
    scans = [(state.lidar_frames[j], pose) for j, pose in sorted(posed.items())]
    cloud, report = colorize_and_fuse(scans, [])
    if config.fusion_downsample > 0:
        cloud = grid_downsample(cloud, config.fusion_downsample)
    write_ply(cloud, args.out, ascii_format=config.fusion_ascii)
    print(f"{len(cloud)} points -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from . import formats
    from .metrics import ape_rpe

    est = formats.read_trajectory(args.estimate, args.format)
    gt = formats.read_trajectory(args.ground_truth, args.format)
    m = ape_rpe(est, gt, align=not args.no_align, rpe_delta=args.rpe_delta)
    for line in m.lines():
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
