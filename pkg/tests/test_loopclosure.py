import io

import numpy as np
import pytest

from voxelsfm.errors import DisconnectedGraph, GaugeError, InsufficientHistory
from voxelsfm.geom import Pose, rotation_angle, se3_exp, so3_exp
from voxelsfm.loopclosure import (
    LIDAR_EDGE,
    LOOP_EDGE,
    RIG_EDGE,
    VISUAL_EDGE,
    DriftThresholds,
    GraphBuildState,
    PoseGraph,
    build_pose_graph,
    detect_lidar_drift,
    detect_visual_drift,
    optimize_pose_graph,
    visual_drift_ratio,
)
from voxelsfm.visual import MapPoint, VisualFrame


def make_vframe(idx, n_feats, triangulated, ts=0.0):
    f = VisualFrame(idx, 1, ts, 500, 500, 320, 240)
    for k in range(n_feats):
        f.observe(k, [10.0 * k, 5.0])
    f.pose = Pose.identity()
    mps = {k: MapPoint([0.0, 0.0, 5.0], [(idx, k), (idx + 1, k)])
           for k in range(triangulated)}
    return f, mps


def test_visual_drift_ratio_above_threshold():
    fa, _ = make_vframe(0, 100, 0)
    fb, mps = make_vframe(1, 100, 50)
    assert visual_drift_ratio(50, 100) == 0.5
    assert not detect_visual_drift(fa, fb, mps, DriftThresholds.kitti())


def test_visual_drift_fires_below_threshold():
    fa, _ = make_vframe(0, 100, 0)
    fb, mps = make_vframe(1, 100, 5)
    assert detect_visual_drift(fa, fb, mps, DriftThresholds.kitti())


def test_visual_drift_no_matches_counts_as_drift():
    fa = VisualFrame(0, 1, 0.0, 500, 500, 320, 240)
    fb = VisualFrame(1, 1, 0.1, 500, 500, 320, 240)
    fa.observe(1, [0.0, 0.0])
    fb.observe(2, [0.0, 0.0])
    assert detect_visual_drift(fa, fb, {})


def straight_poses(n=6, speed=1.0, dt=0.1):
    return [Pose(np.eye(3), [speed * dt * i, 0.0, 0.0], timestamp=dt * i)
            for i in range(n)]


def test_lidar_drift_silent_on_constant_velocity():
    poses = straight_poses()
    assert not detect_lidar_drift(poses, DriftThresholds.kitti())


def test_lidar_drift_fires_on_speed_jump():
    poses = straight_poses(5)
    jump = Pose(np.eye(3), poses[-1].translation + np.array([0.3, 0.0, 0.0]),
                timestamp=poses[-1].timestamp + 0.1)
    assert detect_lidar_drift(poses + [jump], DriftThresholds.kitti())


def test_lidar_drift_fires_on_rotation_jump():
    poses = straight_poses(5)
    turned = Pose(so3_exp([0.0, 0.0, np.radians(5.0)]),
                  poses[-1].translation + np.array([0.1, 0.0, 0.0]),
                  timestamp=poses[-1].timestamp + 0.1)
    assert detect_lidar_drift(poses + [turned], DriftThresholds.kitti())
    # A 5 degree step passes under the looser handheld profile.
    assert not detect_lidar_drift(poses + [turned], DriftThresholds.handheld())


def test_lidar_drift_insufficient_history():
    with pytest.raises(InsufficientHistory):
        detect_lidar_drift(straight_poses(4), DriftThresholds.kitti())


def test_lidar_drift_invariant_under_rigid_transform():
    rng = np.random.default_rng(0)
    poses = straight_poses(5)
    jump = Pose(np.eye(3), poses[-1].translation + np.array([0.25, 0.0, 0.0]),
                timestamp=poses[-1].timestamp + 0.1)
    window = poses + [jump]
    G = Pose(so3_exp(rng.normal(size=3)), rng.normal(scale=10.0, size=3))
    moved = [G.compose(p).with_timestamp(p.timestamp) for p in window]
    th = DriftThresholds.kitti()
    assert detect_lidar_drift(window, th) == detect_lidar_drift(moved, th)
    assert not detect_lidar_drift([G.compose(p).with_timestamp(p.timestamp)
                                   for p in straight_poses(6)], th)


def chain_state(n_visual=6, n_lidar=6):
    """Sequential posed frames with overlapping features, no drift."""
    from voxelsfm.registration import LidarFrame

    rng = np.random.default_rng(1)
    visual_frames = {}
    map_points = {}
    for i in range(n_visual):
        f = VisualFrame(i, 1, 0.2 * i, 500, 500, 320, 240)
        for k in range(i * 5, i * 5 + 30):
            f.observe(k, rng.uniform(0, 640, size=2))
        f.pose = Pose(np.eye(3), [-0.4 * i, 0.0, 0.0])  # world-to-camera
        visual_frames[i] = f
    for k in range(200):
        map_points[k] = MapPoint(rng.uniform(-2, 2, size=3), [(0, k), (1, k)])
    lidar_scans = {}
    for j in range(n_lidar):
        pts = rng.uniform(-1, 1, size=(30, 3))
        frame = LidarFrame(j, 0.2 * j + 0.05, pts, np.full(30, 100.0))
        lidar_scans[j] = (frame, Pose(np.eye(3), [0.4 * j, 0.0, 0.0],
                                      timestamp=frame.timestamp))
    return GraphBuildState(visual_frames, map_points, lidar_scans)


def test_build_graph_top5_no_loops():
    state = chain_state()
    graph = build_pose_graph(state, (), ())
    kinds = {e.kind for e in graph.edges}
    assert kinds <= {VISUAL_EDGE, LIDAR_EDGE, RIG_EDGE}
    assert LOOP_EDGE not in kinds
    assert graph.connected()
    # No duplicate unordered pairs per kind.
    seen = set()
    for e in graph.edges:
        key = (frozenset((e.a, e.b)), e.kind)
        assert key not in seen
        seen.add(key)
    # Top-5 bound per node.
    for node in graph.nodes:
        per_kind = sum(1 for e in graph.edges if e.a == node)
        assert per_kind <= 10


def test_build_graph_consistent_edges_zero_residual():
    state = chain_state()
    graph = build_pose_graph(state, (), ())
    assert graph.residual() < 1e-18


def test_build_graph_disconnected_raises():
    # Two visual frames with no shared features: nothing connects them.
    f0 = VisualFrame(0, 1, 0.0, 500, 500, 320, 240)
    f1 = VisualFrame(1, 1, 0.1, 500, 500, 320, 240)
    for k in range(10):
        f0.observe(k, [float(k), 0.0])
        f1.observe(100 + k, [float(k), 1.0])
    f0.pose = Pose.identity()
    f1.pose = Pose(np.eye(3), [0.1, 0, 0])
    state = GraphBuildState({0: f0, 1: f1}, {}, {})
    with pytest.raises(DisconnectedGraph):
        build_pose_graph(state, (), ())


def circle_poses(n=100, radius=10.0):
    poses = []
    for i in range(n):
        ang = 2 * np.pi * i / n
        t = np.array([radius * np.cos(ang), radius * np.sin(ang), 0.0])
        poses.append(Pose(so3_exp([0.0, 0.0, ang]), t, timestamp=0.1 * i))
    return poses


def test_optimize_consistent_graph_is_fixed_point():
    gt = circle_poses(20)
    graph = PoseGraph()
    for i, p in enumerate(gt):
        graph.nodes[("l", i)] = p
    for i in range(19):
        rel = gt[i].inverse().compose(gt[i + 1])
        graph.add_edge(("l", i), ("l", i + 1), rel, np.eye(6), LIDAR_EDGE)
    before = {n: p for n, p in graph.nodes.items()}
    poses = optimize_pose_graph(graph, anchors=[("l", 0)])
    for n, p in poses.items():
        assert np.abs(p.translation - before[n].translation).max() < 1e-9
        assert np.abs(p.rotation - before[n].rotation).max() < 1e-9


def test_optimize_closes_noisy_loop():
    rng = np.random.default_rng(2)
    n = 100
    gt = circle_poses(n)
    # Odometry-integrated estimate accumulating ~2 m of endpoint drift.
    est = [gt[0]]
    rels = []
    for i in range(n - 1):
        rel = gt[i].inverse().compose(gt[i + 1])
        noise = se3_exp(np.concatenate([rng.normal(scale=0.005, size=3),
                                        rng.normal(scale=0.02, size=3)]))
        rel_noisy = rel.compose(noise)
        rels.append(rel_noisy)
        est.append(est[-1].compose(rel_noisy))
    before_gap = np.linalg.norm(est[-1].translation - gt[-1].translation)
    assert before_gap > 1.5  # meaningful drift in the fixture

    graph = PoseGraph()
    for i, p in enumerate(est):
        graph.nodes[("l", i)] = p
    for i in range(n - 1):
        graph.add_edge(("l", i), ("l", i + 1), rels[i], np.eye(6), LIDAR_EDGE)
    exact = gt[0].inverse().compose(gt[-1])
    graph.add_edge(("l", 0), ("l", n - 1), exact, 10.0 * np.eye(6), LOOP_EDGE)

    r0 = graph.residual()
    poses = optimize_pose_graph(graph, anchors=[("l", 0)])
    assert graph.residual() < r0  # strict decrease
    after_gap = np.linalg.norm(poses[("l", n - 1)].translation - gt[-1].translation)
    assert after_gap < 0.1 * before_gap, (before_gap, after_gap)


def test_optimize_requires_anchor():
    graph = PoseGraph()
    graph.nodes[("l", 0)] = Pose.identity()
    graph.nodes[("l", 1)] = Pose(np.eye(3), [1.0, 0, 0])
    graph.add_edge(("l", 0), ("l", 1), Pose(np.eye(3), [1.0, 0, 0]),
                   np.eye(6), LIDAR_EDGE)
    with pytest.raises(GaugeError):
        optimize_pose_graph(graph, anchors=[])


def test_no_self_edges():
    graph = PoseGraph()
    graph.nodes[("l", 0)] = Pose.identity()
    with pytest.raises(ValueError):
        graph.add_edge(("l", 0), ("l", 0), Pose.identity(), np.eye(6), LOOP_EDGE)


def test_graph_dump_format():
    state = chain_state(3, 3)
    graph = build_pose_graph(state, (), ())
    buf = io.StringIO()
    graph.dump(buf)
    lines = buf.getvalue().strip().splitlines()
    assert len(lines) == len(graph.edges)
    for line in lines:
        parts = line.split()
        assert parts[0] == "EDGE"
        assert parts[1] in (VISUAL_EDGE, LIDAR_EDGE, LOOP_EDGE, RIG_EDGE)
        # EDGE kind a b tx ty tz qx qy qz qw w
        assert len(parts) == 12
        float(parts[-1])
