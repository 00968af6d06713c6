"""End-to-end driver: initialization, alternating registration, mapping
with periodic joint adjustment, loop closure, and dense fusion.

Stages are plain functions over a PipelineState so the CLI can run them
individually on intermediate artifacts. Every stage appends a structured
log line with its wall time.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .bundle import (
    BundleProblem,
    FrameRefresh,
    LidarBlock,
    VoxelRefreshPlan,
    joint_ba,
    refresh_voxel_map,
)
from .config import PipelineConfig, save_config, config_to_dict
from .errors import (
    ConsensusFailed,
    DegenerateBaseline,
    DegenerateGeometry,
    Diverged,
    Exhausted,
    IcpDiverged,
    InsufficientOverlap,
    StageError,
    TooFewCorrespondences,
    VoxelSfmError,
)
from .fusion import colorize_and_fuse, grid_downsample, write_ply
from .geom import Pose, se3_exp
from .loopclosure import (
    DriftThresholds,
    GraphBuildState,
    build_pose_graph,
    detect_lidar_drift,
    detect_visual_drift,
)
from .metrics import ape_rpe
from .registration import (
    LidarFrame,
    SelectionState,
    register_lidar_frame,
    select_next_frames,
)
from .sim import SceneColorSampler, SceneSpec
from .visual import (
    Extrinsics,
    MapPoint,
    VisualFrame,
    align_lidar_to_visual,
    init_lidar_pair_icp,
    pnp_register,
    triangulate,
    two_view_init,
)
from .voxelmap import VoxelMap


@dataclass
class RegisteredScan:
    frame: LidarFrame
    pose: Pose                 # current estimate (world from LiDAR)
    map_pose: Pose             # pose at which the points currently sit in the map
    absorbed: np.ndarray
    reg_index: int


@dataclass
class PipelineState:
    config: PipelineConfig
    lidar_frames: dict = field(default_factory=dict)    # frame_index -> LidarFrame
    visual_frames: dict = field(default_factory=dict)   # frame_index -> VisualFrame
    extrinsics: Extrinsics | None = None
    vmap: VoxelMap | None = None
    map_points: dict = field(default_factory=dict)
    registered: dict = field(default_factory=dict)      # lidar frame_index -> RegisteredScan
    reg_order: list = field(default_factory=list)
    gt_poses: list | None = None
    scene: SceneSpec | None = None
    log_lines: list = field(default_factory=list)
    loop_edges: int = 0
    since_ba: int = 0

    def log(self, stage, message, t0=None):
        wall = "" if t0 is None else " wall=%.3fs" % (time.perf_counter() - t0)
        line = f"[{stage}]{wall} {message}"
        self.log_lines.append(line)

    # Scheduler helpers -----------------------------------------------------

    def visual_match_scores(self):
        scores = {}
        for i, f in self.visual_frames.items():
            if f.pose is not None:
                continue
            scores[i] = sum(1 for fid in f.observations if fid in self.map_points)
        return scores

    def predicted_lidar_pose(self, lidar_id, visual_id) -> Pose:
        frame = self.visual_frames[visual_id]
        if frame.pose is None:
            # The candidate camera registers right after selection; until
            # then predict from the posed camera closest to the scan time.
            ts = self.lidar_frames[lidar_id].timestamp
            posed = [(abs(f.timestamp - ts), i)
                     for i, f in self.visual_frames.items() if f.pose is not None]
            _, i = min(posed)
            frame = self.visual_frames[i]
        return self.extrinsics.lidar_pose_from_camera(frame.pose, frame.camera_id)


# ---------------------------------------------------------------------------
# Input loading


def load_inputs(config: PipelineConfig) -> PipelineState:
    t0 = time.perf_counter()
    state = PipelineState(config)
    times = formats.read_timestamps(config.lidar_times)
    names = sorted(n for n in os.listdir(config.lidar_dir) if n.endswith(".bin"))
    if len(names) != len(times):
        raise StageError("load", f"{len(names)} scans vs {len(times)} timestamps")
    for k, name in enumerate(names):
        if k % config.lidar_stride:
            continue
        frame = formats.read_kitti_bin(os.path.join(config.lidar_dir, name),
                                       frame_index=k, timestamp=times[k])
        state.lidar_frames[k] = frame

    cam_rows = formats.read_cameras(config.cameras_file)
    for row in cam_rows:
        idx, cam_id, ts, fu, fv, cu, cv, w, h = row
        state.visual_frames[idx] = VisualFrame(idx, cam_id, ts, fu, fv, cu, cv,
                                               width=w, height=h)
    for fi, cam_id, fid, u, v in formats.read_tracks(config.tracks_file):
        frame = state.visual_frames.get(fi)
        if frame is not None:
            frame.observe(fid, (u, v))
    if config.visual_stride > 1:
        keep = {}
        per_cam = {}
        for i in sorted(state.visual_frames):
            f = state.visual_frames[i]
            k = per_cam.setdefault(f.camera_id, 0)
            if k % config.visual_stride == 0:
                keep[i] = f
            per_cam[f.camera_id] = k + 1
        state.visual_frames = keep

    state.extrinsics = Extrinsics(dict(config.extrinsics))
    if config.gt_trajectory:
        state.gt_poses = formats.read_trajectory(config.gt_trajectory,
                                                 config.gt_format)
    if config.scene_file:
        import yaml

        with open(config.scene_file, "r", encoding="utf-8") as f:
            state.scene = SceneSpec.from_dict(yaml.safe_load(f))
    state.vmap = VoxelMap(config.voxel)
    state.log("load", f"{len(state.lidar_frames)} lidar frames, "
                      f"{len(state.visual_frames)} visual frames", t0)
    return state


# ---------------------------------------------------------------------------
# Initialization


def initialize(state: PipelineState) -> None:
    t0 = time.perf_counter()
    cfg = state.config
    cam1 = [i for i in sorted(state.visual_frames)
            if state.visual_frames[i].camera_id == 1]
    if len(cam1) < 2:
        raise StageError("init", "need at least two frames from camera 1")
    result = None
    pair = None
    for a_pos, ia in enumerate(cam1[:-1]):
        for ib in cam1[a_pos + 1:a_pos + 6]:
            try:
                result = two_view_init(state.visual_frames[ia],
                                       state.visual_frames[ib])
                pair = (ia, ib)
                break
            except (DegenerateGeometry, VoxelSfmError):
                continue
        if result is not None:
            break
    if result is None:
        raise StageError("init", "no visual pair admits two-view geometry")
    ia, ib = pair
    frame_a = state.visual_frames[ia]
    frame_b = state.visual_frames[ib]
    frame_a.pose = result.pose_a
    frame_b.pose = result.pose_b
    state.map_points = dict(result.points)

    lidar_ids = sorted(state.lidar_frames)
    la = min(lidar_ids, key=lambda j: (abs(state.lidar_frames[j].timestamp
                                           - frame_a.timestamp), j))
    lb = min((j for j in lidar_ids if j != la),
             key=lambda j: (abs(state.lidar_frames[j].timestamp
                                - frame_b.timestamp), j))
    try:
        icp = init_lidar_pair_icp(state.lidar_frames[la], state.lidar_frames[lb],
                                  Pose.identity())
    except IcpDiverged as exc:
        raise StageError("init", f"bootstrap ICP failed: {exc}") from exc
    # Point-to-point ICP aligns the sampling patterns, which biases the
    # in-plane translation on sparse scans of flat surfaces. Refine against
    # a one-frame Gaussian map of frame a.
    rel = icp.pose
    mini = VoxelMap(cfg.voxel)
    mini.insert_frame(state.lidar_frames[la].points,
                      state.lidar_frames[la].intensities, 0)
    try:
        refined = register_lidar_frame(state.lidar_frames[lb], rel, mini,
                                       cfg.registration)
        rel = refined.pose
    except (InsufficientOverlap, Diverged):
        pass

    lidar_poses = [Pose.identity(state.lidar_frames[la].timestamp),
                   rel.with_timestamp(state.lidar_frames[lb].timestamp)]
    camera_poses = [frame_a.pose, frame_b.pose]
    camera_ids = [frame_a.camera_id, frame_b.camera_id]
    sim = align_lidar_to_visual(lidar_poses, camera_poses, camera_ids,
                                state.extrinsics)
    # The visual map is up to scale; divide it by the recovered scale so the
    # global frame is metric, then place the LiDAR frames rigidly.
    s = sim.scale
    for f in (frame_a, frame_b):
        f.pose = Pose(f.pose.rotation, f.pose.translation / s, f.timestamp)
    for mp in state.map_points.values():
        mp.position = mp.position / s
    G = Pose(sim.rotation, sim.translation / s)
    for j, lp in zip((la, lb), lidar_poses):
        world = G.compose(lp).with_timestamp(state.lidar_frames[j].timestamp)
        _insert_scan(state, j, world)
    state.log("init", f"pair v{ia}/v{ib}, lidar l{la}/l{lb}, "
                      f"scale {1.0 / s:.4f} m/unit, "
                      f"{len(state.map_points)} seed points", t0)


def _insert_scan(state: PipelineState, lidar_id: int, pose: Pose) -> None:
    frame = state.lidar_frames[lidar_id]
    reg_index = len(state.reg_order)
    absorbed = state.vmap.insert_frame(pose.apply(frame.points),
                                       frame.intensities, reg_index)
    state.registered[lidar_id] = RegisteredScan(frame, pose, pose, absorbed,
                                                reg_index)
    state.reg_order.append(lidar_id)
    state.since_ba += 1


# ---------------------------------------------------------------------------
# Alternating registration


def _triangulate_new_points(state: PipelineState, new_frame: VisualFrame) -> int:
    cfg = state.config
    added = 0
    posed = {i: f for i, f in state.visual_frames.items() if f.pose is not None}
    for fid in sorted(new_frame.observations):
        mp = state.map_points.get(fid)
        if mp is not None:
            if (new_frame.frame_index, fid) not in mp.track:
                mp.track.append((new_frame.frame_index, fid))
            continue
        views = [(f, f.observations[fid]) for i, f in posed.items()
                 if fid in f.observations]
        if len(views) < 2:
            continue
        try:
            x, rms = triangulate(views)
        except DegenerateBaseline:
            continue
        if rms > cfg.triangulation_max_error_px:
            continue
        if any(f.pose.apply(x)[2] <= 1e-6 for f, _ in views):
            continue
        state.map_points[fid] = MapPoint(
            x, [(f.frame_index, fid) for f, _ in views])
        added += 1
    return added


def register_loop(state: PipelineState) -> None:
    t0 = time.perf_counter()
    cfg = state.config
    registered_v = 0
    registered_l = 0
    dropped = set()
    while True:
        scores = {i: s for i, s in state.visual_match_scores().items()
                  if i not in dropped and s >= cfg.pnp_min_matches}
        sel = SelectionState(
            visual_scores=scores,
            visual_times={i: state.visual_frames[i].timestamp for i in scores},
            lidar_times={j: state.lidar_frames[j].timestamp
                         for j in state.lidar_frames if j not in state.registered},
            registered_lidar=[(j, state.registered[j].pose)
                              for j in state.reg_order],
            predicted_pose=state.predicted_lidar_pose,
        )
        try:
            visual_id, lidar_id = select_next_frames(sel)
        except Exhausted:
            break
        frame = state.visual_frames[visual_id]
        try:
            res = pnp_register(frame, state.map_points, seed=cfg.seed)
        except (TooFewCorrespondences, ConsensusFailed) as exc:
            state.log("register", f"v{visual_id} pnp failed: {exc}")
            dropped.add(visual_id)
            continue
        frame.pose = res.pose
        registered_v += 1
        _triangulate_new_points(state, frame)

        if lidar_id is not None:
            init = state.extrinsics.lidar_pose_from_camera(frame.pose,
                                                           frame.camera_id)
            lframe = state.lidar_frames[lidar_id]
            try:
                reg = register_lidar_frame(lframe, init, state.vmap,
                                           cfg.registration)
            except (InsufficientOverlap, Diverged) as exc:
                state.log("register", f"l{lidar_id} failed: {exc}")
            else:
                pose = reg.pose
                pose = _maybe_inject_jump(state, lidar_id, pose)
                _insert_scan(state, lidar_id, pose)
                registered_l += 1
                if state.since_ba >= cfg.ba_every:
                    run_bundle_stage(state)
    state.log("register", f"{registered_v} visual, {registered_l} lidar frames", t0)


def _maybe_inject_jump(state: PipelineState, lidar_id: int, pose: Pose) -> Pose:
    hook = state.config.inject_jump
    if hook and int(hook.get("lidar_frame_index", -1)) == lidar_id:
        twist = np.asarray(hook.get("twist", [0.0] * 6), dtype=float)
        state.log("register", f"injecting pose jump at l{lidar_id}")
        return se3_exp(twist).compose(pose)
    return pose


def register_rest(state: PipelineState) -> None:
    """Sweep LiDAR frames the scheduler never reached (deferred slots)."""
    t0 = time.perf_counter()
    cfg = state.config
    posed_cams = sorted(((f.timestamp, i) for i, f in state.visual_frames.items()
                        if f.pose is not None))
    count = 0
    for j in sorted(state.lidar_frames):
        if j in state.registered or not posed_cams:
            continue
        ts = state.lidar_frames[j].timestamp
        _, ci = min(posed_cams, key=lambda p: (abs(p[0] - ts), p[1]))
        frame = state.visual_frames[ci]
        init = state.extrinsics.lidar_pose_from_camera(frame.pose, frame.camera_id)
        try:
            reg = register_lidar_frame(state.lidar_frames[j], init, state.vmap,
                                       cfg.registration)
        except (InsufficientOverlap, Diverged) as exc:
            state.log("register", f"l{j} final sweep failed: {exc}")
            continue
        pose = _maybe_inject_jump(state, j, reg.pose)
        _insert_scan(state, j, pose)
        count += 1
        if state.since_ba >= cfg.ba_every:
            run_bundle_stage(state)
    if count:
        state.log("register", f"{count} deferred lidar frames", t0)


# ---------------------------------------------------------------------------
# Bundle adjustment and refresh


def _build_problem(state: PipelineState) -> BundleProblem:
    cfg = state.config
    blocks = []
    for j in state.reg_order:
        scan = state.registered[j]
        pts = scan.frame.points
        intens = scan.frame.intensities
        if cfg.ba_max_points and len(pts) > cfg.ba_max_points:
            stride = int(np.ceil(len(pts) / cfg.ba_max_points))
            pts = pts[::stride]
            intens = intens[::stride]
        blocks.append(LidarBlock(j, scan.reg_index, pts, intens, scan.pose))
    posed = {i: f for i, f in state.visual_frames.items() if f.pose is not None}
    anchor = min(posed) if posed else None
    return BundleProblem(cameras=posed, map_points=state.map_points,
                         lidar=blocks, vmap=state.vmap,
                         fixed_cameras={anchor} if anchor is not None else set())


def run_bundle_stage(state: PipelineState) -> None:
    t0 = time.perf_counter()
    problem = _build_problem(state)
    report = joint_ba(problem, state.config.ba)
    for line in report.log_lines:
        state.log_lines.append("[ba] " + line)
    for block in problem.lidar:
        state.registered[block.frame_index].pose = block.pose
    refresh_stage(state)
    state.since_ba = 0
    state.log("ba", "E %.6g -> %.6g (%d iters)"
              % (report.initial_energy, report.final_energy,
                 report.iterations), t0)


def refresh_stage(state: PipelineState) -> None:
    t0 = time.perf_counter()
    frames = []
    for j in state.reg_order:
        scan = state.registered[j]
        frames.append(FrameRefresh(j, scan.reg_index, scan.frame.points,
                                   scan.frame.intensities, scan.map_pose,
                                   scan.pose, scan.absorbed))
    plan = VoxelRefreshPlan(frames)
    report = refresh_voxel_map(state.vmap, plan)
    for fr in frames:
        scan = state.registered[fr.frame_index]
        scan.absorbed = fr.absorbed
        scan.map_pose = scan.pose
    missing = sum(len(v) for v in report.missing.values())
    state.log("refresh", f"deleted {report.deleted}, added {report.added}, "
                         f"missing {missing}", t0)


# ---------------------------------------------------------------------------
# Loop closure


def loop_closure_stage(state: PipelineState) -> None:
    t0 = time.perf_counter()
    cfg = state.config
    thresholds = DriftThresholds.profile(cfg.drift_profile)

    visual_pairs = []
    by_cam = {}
    for i, f in state.visual_frames.items():
        if f.pose is not None:
            by_cam.setdefault(f.camera_id, []).append((f.timestamp, i))
    for cam_id, items in sorted(by_cam.items()):
        items.sort()
        for (_, ia), (_, ib) in zip(items, items[1:]):
            if detect_visual_drift(state.visual_frames[ia],
                                   state.visual_frames[ib],
                                   state.map_points, thresholds):
                visual_pairs.append((ia, ib))

    lidar_pairs = []
    lids = sorted(state.registered,
                  key=lambda j: state.registered[j].frame.timestamp)
    window_poses = [state.registered[j].pose.with_timestamp(
        state.registered[j].frame.timestamp) for j in lids]
    for k in range(4, len(lids)):
        if detect_lidar_drift(window_poses[k - 4:k + 1], thresholds):
            lidar_pairs.append((lids[k - 1], lids[k]))

    if not visual_pairs and not lidar_pairs:
        state.log("loop", "no drift detected", t0)
        run_bundle_stage(state)
        return

    cam_body = []
    for i, f in state.visual_frames.items():
        if f.pose is not None:
            cam_body.append((f.timestamp,
                             state.extrinsics.lidar_pose_from_camera(
                                 f.pose, f.camera_id)))
    cam_body.sort(key=lambda p: p[0])
    gstate = GraphBuildState(
        visual_frames=state.visual_frames,
        map_points=state.map_points,
        lidar_scans={j: (state.registered[j].frame, state.registered[j].pose)
                     for j in state.reg_order},
        vmap=state.vmap,
        camera_body_poses=cam_body,
        reg_opts=cfg.registration,
    )
    from .loopclosure import LOOP_EDGE, optimize_pose_graph

    graph = build_pose_graph(gstate, visual_pairs, lidar_pairs)
    state.loop_edges = sum(1 for e in graph.edges if e.kind == LOOP_EDGE)
    posed_v = [i for i, f in state.visual_frames.items() if f.pose is not None]
    anchor = ("v", min(posed_v)) if posed_v else ("l", state.reg_order[0])
    optimized = optimize_pose_graph(graph, anchors=[anchor])
    for (kind, i), pose in optimized.items():
        if kind == "v":
            state.visual_frames[i].pose = pose.inverse().with_timestamp(
                state.visual_frames[i].timestamp)
        else:
            state.registered[i].pose = pose.with_timestamp(
                state.registered[i].frame.timestamp)
    state.log("loop", f"{len(visual_pairs)} visual + {len(lidar_pairs)} lidar "
                      f"drift pairs, {state.loop_edges} loop edges", t0)
    # Distribute the correction into the map, then a final joint adjustment.
    refresh_stage(state)
    run_bundle_stage(state)
    state.graph = graph


# ---------------------------------------------------------------------------
# Output


def fusion_stage(state: PipelineState, out_dir):
    t0 = time.perf_counter()
    cfg = state.config
    scans = [(state.registered[j].frame, state.registered[j].pose)
             for j in sorted(state.registered)]
    unposed = [(state.lidar_frames[j], None) for j in sorted(state.lidar_frames)
               if j not in state.registered]
    cameras = [f for f in state.visual_frames.values() if f.pose is not None]
    samplers = {}
    if state.scene is not None:
        for f in cameras:
            samplers[f.frame_index] = SceneColorSampler(
                state.scene, f.pose, f.fu, f.fv, f.cu, f.cv)
    cloud, report = colorize_and_fuse(scans + unposed, cameras, samplers)
    if cfg.fusion_downsample > 0:
        cloud = grid_downsample(cloud, cfg.fusion_downsample)
    path = os.path.join(out_dir, "fused.ply")
    write_ply(cloud, path, ascii_format=cfg.fusion_ascii)
    state.log("fuse", f"{len(cloud)} points ({report.colored_points} colored, "
                      f"{len(report.skipped_frames)} frames skipped)", t0)
    return path


def write_outputs(state: PipelineState):
    cfg = state.config
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    lidar_ids = sorted(state.registered)
    lidar_traj = [state.registered[j].pose.with_timestamp(
        state.registered[j].frame.timestamp) for j in lidar_ids]
    formats.write_trajectory(os.path.join(out, "lidar_trajectory.tum"),
                             lidar_traj, fmt="tum")
    cam_ids = sorted(i for i, f in state.visual_frames.items()
                     if f.pose is not None)
    cam_traj = [state.visual_frames[i].pose.inverse().with_timestamp(
        state.visual_frames[i].timestamp) for i in cam_ids]
    formats.write_trajectory(os.path.join(out, "camera_trajectory.tum"),
                             cam_traj, fmt="tum")
    ply_path = fusion_stage(state, out)

    metrics = None
    if state.gt_poses is not None:
        gt_by_index = {k: p for k, p in enumerate(state.gt_poses)}
        pairs = [(state.registered[j].pose, gt_by_index[j])
                 for j in lidar_ids if j in gt_by_index]
        if pairs:
            est, gt = zip(*pairs)
            est = [p.with_timestamp(None) for p in est]
            gt = [p.with_timestamp(None) for p in gt]
            metrics = ape_rpe(est, gt, align=True, rpe_delta=1)
            with open(os.path.join(out, "metrics.txt"), "w",
                      encoding="ascii") as f:
                f.write("\n".join(metrics.lines()) + "\n")
    graph = getattr(state, "graph", None)
    if graph is not None:
        with open(os.path.join(out, "pose_graph.txt"), "w",
                  encoding="ascii") as f:
            graph.dump(f)
    with open(os.path.join(out, "pipeline.log"), "w", encoding="utf-8") as f:
        f.write("\n".join(state.log_lines) + "\n")
    return {"lidar_trajectory": os.path.join(out, "lidar_trajectory.tum"),
            "camera_trajectory": os.path.join(out, "camera_trajectory.tum"),
            "fused_ply": ply_path,
            "metrics": metrics,
            "log": os.path.join(out, "pipeline.log")}


def run_pipeline(config: PipelineConfig):
    """Full flow; raises StageError with partial artifacts preserved."""
    np.random.seed(config.seed)  # legacy global state, kept pinned for determinism
    state = load_inputs(config)
    os.makedirs(config.output_dir, exist_ok=True)
    stage = "init"
    try:
        initialize(state)
        stage = "register"
        register_loop(state)
        register_rest(state)
        stage = "loop"
        # Drift detection runs on the current estimates; the loop stage
        # always finishes with a full refresh and one final adjustment.
        loop_closure_stage(state)
        stage = "output"
        artifacts = write_outputs(state)
    except VoxelSfmError as exc:
        try:
            with open(os.path.join(config.output_dir, "pipeline.log"), "w",
                      encoding="utf-8") as f:
                f.write("\n".join(state.log_lines) + "\n")
        except OSError:
            pass
        if isinstance(exc, StageError):
            raise
        raise StageError(stage, exc) from exc
    return state, artifacts


# ---------------------------------------------------------------------------
# Scene artifact generation (the `sim` subcommand)


def generate_scene_artifacts(scene: SceneSpec, out_dir,
                             extrinsics: Extrinsics | None = None):
    """Write scans, tracks, camera metadata, ground truth, the scene, and a
    ready-to-run pipeline config into a directory."""
    from .sim import gen_observations, gen_scan

    os.makedirs(out_dir, exist_ok=True)
    lidar_dir = os.path.join(out_dir, "lidar")
    os.makedirs(lidar_dir, exist_ok=True)
    if extrinsics is None:
        # Forward-looking rig: camera z (optical axis) along body x,
        # camera x (right) along body -y, camera y (down) along body -z.
        R_cam = np.array([[0.0, 0.0, 1.0],
                          [-1.0, 0.0, 0.0],
                          [0.0, -1.0, 0.0]])
        extrinsics = Extrinsics({
            1: Pose(R_cam, [0.08, 0.0, 0.02]),
            2: Pose(R_cam, [-0.08, 0.0, 0.02]),
        })
    rng = np.random.default_rng(scene.seed)
    landmarks, _ = scene.landmarks()

    times = scene.lidar_timestamps()
    gt_poses = []
    for k, t in enumerate(times):
        pose = scene.trajectory.pose_at(t)
        scan = gen_scan(scene, pose, frame_index=k)
        formats.write_kitti_bin(os.path.join(lidar_dir, "%06d.bin" % k), scan)
        gt_poses.append(pose)
    formats.write_timestamps(os.path.join(out_dir, "lidar_times.txt"), times)
    formats.write_trajectory(os.path.join(out_dir, "gt_lidar.tum"), gt_poses,
                             fmt="tum")

    cam_rows = []
    track_rows = []
    cam = scene.camera
    idx = 0
    for t in scene.camera_timestamps():
        body = scene.trajectory.pose_at(t)
        for cam_id in sorted(extrinsics.lidar_from_camera):
            world_to_camera = extrinsics.camera_pose_from_lidar(body, cam_id)
            frame = VisualFrame(idx, cam_id, t, cam.fu, cam.fv, cam.cu, cam.cv,
                                width=cam.width, height=cam.height)
            n = gen_observations(scene, frame, world_to_camera, landmarks, rng)
            cam_rows.append((idx, cam_id, t, cam.fu, cam.fv, cam.cu, cam.cv,
                             cam.width, cam.height))
            for fid in sorted(frame.observations):
                u, v = frame.observations[fid]
                track_rows.append((idx, cam_id, fid, u, v))
            idx += 1
    formats.write_cameras(os.path.join(out_dir, "cameras.txt"), cam_rows)
    formats.write_tracks(os.path.join(out_dir, "tracks.txt"), track_rows)

    import yaml

    with open(os.path.join(out_dir, "scene.yaml"), "w", encoding="utf-8") as f:
        yaml.safe_dump(scene.to_dict(), f, sort_keys=True)

    config = PipelineConfig(
        lidar_dir="lidar",
        lidar_times="lidar_times.txt",
        tracks_file="tracks.txt",
        cameras_file="cameras.txt",
        gt_trajectory="gt_lidar.tum",
        gt_format="tum",
        scene_file="scene.yaml",
        output_dir="out",
        extrinsics=dict(extrinsics.lidar_from_camera),
        seed=scene.seed,
    )
    save_config(config, os.path.join(out_dir, "config.yaml"))
    return os.path.join(out_dir, "config.yaml")
