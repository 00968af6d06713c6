"""Drift detection over consecutive frames, pose-graph construction with
loop edges, and pose-graph optimization.

Graph nodes carry world-from-sensor poses for both camera and LiDAR
frames (camera extrinsic poses are inverted on the way in and out). Edge
residuals are twist logs of the relative-pose mismatch; a damped
Gauss-Newton pass distributes loop corrections over the whole trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DisconnectedGraph,
    GaugeError,
    InsufficientHistory,
    SolverFailed,
)
from .geom import Pose, _quat_from_rotation, rotation_angle, se3_exp, se3_log, so3_hat


@dataclass
class DriftThresholds:
    """Detector limits; profiles follow capture style (vehicle vs handheld)."""

    visual_consensus_ratio: float = 0.1
    delta_alpha_deg: float = 3.0
    delta_s: float = 2.0

    def __post_init__(self):
        if self.delta_s < 1.0:
            raise ValueError("delta_s must be >= 1")

    @staticmethod
    def kitti() -> "DriftThresholds":
        return DriftThresholds(0.1, 3.0, 2.0)

    @staticmethod
    def handheld() -> "DriftThresholds":
        return DriftThresholds(0.1, 10.0, 3.0)

    @staticmethod
    def profile(name: str) -> "DriftThresholds":
        try:
            return {"kitti": DriftThresholds.kitti,
                    "handheld": DriftThresholds.handheld}[name]()
        except KeyError:
            raise ValueError(f"unknown drift profile {name!r}") from None


def visual_drift_ratio(consensus: int, matches: int) -> float:
    if matches <= 0:
        return 0.0
    return consensus / matches


def detect_visual_drift(frame_a, frame_b, map_points,
                        thresholds: DriftThresholds | None = None) -> bool:
    """Drift between two consecutive camera frames: the share of their
    feature matches backed by triangulated map points falls below the
    consensus ratio. No matches at all counts as drift."""
    thresholds = thresholds or DriftThresholds()
    shared = set(frame_a.observations) & set(frame_b.observations)
    if not shared:
        return True
    consensus = sum(1 for fid in shared if fid in map_points)
    return visual_drift_ratio(consensus, len(shared)) < thresholds.visual_consensus_ratio


def detect_lidar_drift(window, thresholds: DriftThresholds | None = None) -> bool:
    """Drift between the two newest LiDAR frames in a timestamped pose
    window.

    The three prior consecutive-frame speeds predict the current pair's
    speed by linear extrapolation; drift fires when the bigger-over-
    smaller speed ratio exceeds delta_s or the relative rotation exceeds
    delta_alpha.
    """
    thresholds = thresholds or DriftThresholds()
    poses = list(window)
    if len(poses) < 5:
        raise InsufficientHistory(f"{len(poses)} < 5 registered frames")
    poses = poses[-5:]
    times = [p.timestamp for p in poses]
    if any(t is None for t in times):
        raise InsufficientHistory("poses in the window need timestamps")
    speeds = []
    mids = []
    for i in range(4):
        dt = times[i + 1] - times[i]
        if dt <= 0:
            raise InsufficientHistory("window timestamps must increase")
        d = np.linalg.norm(poses[i + 1].translation - poses[i].translation)
        speeds.append(d / dt)
        mids.append(0.5 * (times[i + 1] + times[i]))
    coeffs = np.polyfit(mids[:3], speeds[:3], 1)
    expected = float(np.polyval(coeffs, mids[3]))
    actual = speeds[3]
    if actual < 1e-12 and expected < 1e-12:
        ratio = 1.0
    else:
        lo = max(min(actual, expected), 1e-12)
        ratio = max(actual, expected) / lo
    angle = np.degrees(rotation_angle(poses[3].rotation.T @ poses[4].rotation))
    return angle > thresholds.delta_alpha_deg or ratio > thresholds.delta_s


VISUAL_EDGE = "visual-top5"
LIDAR_EDGE = "lidar-top5"
LOOP_EDGE = "loop"
# Ties each LiDAR frame to its time-closest camera frame. Without these the
# two sensor families form separate components whenever no loop edge spans
# them, and a joint adjustment would be meaningless.
RIG_EDGE = "rig"


@dataclass
class GraphEdge:
    a: tuple
    b: tuple
    relative: Pose            # measured a-from-b: X_a^-1 X_b
    information: np.ndarray   # 6x6 weight
    kind: str


@dataclass
class PoseGraph:
    nodes: dict = field(default_factory=dict)   # node id -> Pose (world-from-node)
    edges: list = field(default_factory=list)

    def add_edge(self, a, b, relative, information, kind):
        if a == b:
            raise ValueError("loop edges must connect distinct frames")
        key = (frozenset((a, b)), kind)
        if key in self._edge_keys():
            return False
        self.edges.append(GraphEdge(a, b, relative, np.asarray(information, float), kind))
        return True

    def _edge_keys(self):
        return {(frozenset((e.a, e.b)), e.kind) for e in self.edges}

    def connected(self) -> bool:
        if not self.nodes:
            return True
        parent = {n: n for n in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in self.edges:
            ra, rb = find(e.a), find(e.b)
            if ra != rb:
                parent[ra] = rb
        roots = {find(n) for n in self.nodes}
        return len(roots) <= 1

    def residual(self) -> float:
        total = 0.0
        for e in self.edges:
            X_a = self.nodes[e.a]
            X_b = self.nodes[e.b]
            r = se3_log(e.relative.inverse().compose(X_a.inverse()).compose(X_b))
            total += float(r @ e.information @ r)
        return total

    def dump(self, stream) -> None:
        """`EDGE kind a b tx ty tz qx qy qz qw w` per edge."""
        for e in self.edges:
            q = _quat_from_rotation(e.relative.rotation)
            t = e.relative.translation
            stream.write("EDGE %s %s %s %.9g %.9g %.9g %.9g %.9g %.9g %.9g %.6g\n"
                         % (e.kind, _node_name(e.a), _node_name(e.b),
                            t[0], t[1], t[2], q[0], q[1], q[2], q[3],
                            float(e.information[0, 0])))


def _node_name(node_id):
    return f"{node_id[0]}{node_id[1]}"


@dataclass
class GraphBuildState:
    """Everything the builder needs from the pipeline.

    ``lidar_scans`` maps frame id to (LidarFrame, world-from-lidar Pose).
    ``camera_body_poses`` is a timestamp-sorted list of (timestamp,
    world-from-body Pose) used to seed LiDAR loop-edge refinement.
    """

    visual_frames: dict
    map_points: dict
    lidar_scans: dict
    vmap: object = None
    camera_body_poses: list = field(default_factory=list)
    reg_opts: object = None


def build_pose_graph(state: GraphBuildState, visual_drift_pairs=(),
                     lidar_drift_pairs=(), top_k: int = 5,
                     loop_weight: float = 10.0, rig_edges: bool = True) -> PoseGraph:
    """Assemble the odometry-style top-k edges plus verified loop edges.

    Visual loop edges re-register the newer frame against the older
    frame's map points by PnP; LiDAR loop edges refine against the global
    voxel map starting from the time-closest camera pair's relative pose.
    When both frame families are present, rig edges stitch them together.
    """
    graph = PoseGraph()
    posed_v = {i: f for i, f in state.visual_frames.items() if f.pose is not None}
    for i, f in posed_v.items():
        graph.nodes[("v", i)] = f.pose.inverse().with_timestamp(f.timestamp)
    for i, (frame, pose) in state.lidar_scans.items():
        graph.nodes[("l", i)] = pose.with_timestamp(frame.timestamp)
    if len(graph.nodes) < 2:
        raise DisconnectedGraph("need at least two frames")

    eye = np.eye(6)
    # Visual frames: top-k most feature matches.
    ids = sorted(posed_v)
    feats = {i: set(posed_v[i].observations) for i in ids}
    for i in ids:
        counts = [(len(feats[i] & feats[j]), j) for j in ids if j != i]
        counts.sort(key=lambda p: (-p[0], p[1]))
        for score, j in counts[:top_k]:
            if score == 0:
                continue
            a, b = ("v", i), ("v", j)
            rel = graph.nodes[a].inverse().compose(graph.nodes[b])
            graph.add_edge(a, b, rel, eye, VISUAL_EDGE)

    # LiDAR frames: top-k nearest positions.
    lids = sorted(state.lidar_scans)
    for i in lids:
        pi = graph.nodes[("l", i)].translation
        near = sorted((float(np.linalg.norm(graph.nodes[("l", j)].translation - pi)), j)
                      for j in lids if j != i)
        for _, j in near[:top_k]:
            a, b = ("l", i), ("l", j)
            rel = graph.nodes[a].inverse().compose(graph.nodes[b])
            graph.add_edge(a, b, rel, eye, LIDAR_EDGE)

    if rig_edges and ids and lids:
        vtimes = [(posed_v[i].timestamp, i) for i in ids]
        for j in lids:
            ts = state.lidar_scans[j][0].timestamp
            _, i = min(vtimes, key=lambda p: (abs(p[0] - ts), p[1]))
            a, b = ("l", j), ("v", i)
            rel = graph.nodes[a].inverse().compose(graph.nodes[b])
            graph.add_edge(a, b, rel, eye, RIG_EDGE)

    # Loop edges from detected drifts.
    for (ia, ib) in visual_drift_pairs:
        rel = _visual_loop_edge(state, posed_v, ia, ib)
        if rel is not None:
            graph.add_edge(("v", ia), ("v", ib), rel, loop_weight * eye, LOOP_EDGE)
    for (ia, ib) in lidar_drift_pairs:
        rel = _lidar_loop_edge(state, ia, ib)
        if rel is not None:
            graph.add_edge(("l", ia), ("l", ib), rel, loop_weight * eye, LOOP_EDGE)

    if not graph.connected():
        raise DisconnectedGraph("pose graph is not connected")
    return graph


def _visual_loop_edge(state, posed_v, ia, ib):
    from .errors import ConsensusFailed, TooFewCorrespondences
    from .visual import pnp_register

    frame_a = posed_v.get(ia)
    frame_b = posed_v.get(ib)
    if frame_a is None or frame_b is None:
        return None
    seen_by_a = {fid: mp for fid, mp in state.map_points.items()
                 if fid in frame_a.observations}
    try:
        res = pnp_register(frame_b, seen_by_a)
    except (TooFewCorrespondences, ConsensusFailed):
        return None
    X_a = frame_a.pose.inverse()
    X_b = res.pose.inverse()
    return X_a.inverse().compose(X_b)


def _lidar_loop_edge(state, ia, ib):
    from .errors import Diverged, InsufficientOverlap
    from .registration import register_lidar_frame

    if state.vmap is None or ia not in state.lidar_scans or ib not in state.lidar_scans:
        return None
    frame_a, pose_a = state.lidar_scans[ia]
    frame_b, pose_b = state.lidar_scans[ib]
    init = pose_b
    if state.camera_body_poses:
        body_a = _closest_body_pose(state.camera_body_poses, frame_a.timestamp)
        body_b = _closest_body_pose(state.camera_body_poses, frame_b.timestamp)
        if body_a is not None and body_b is not None:
            init = pose_a.compose(body_a.inverse().compose(body_b))
    try:
        res = register_lidar_frame(frame_b, init, state.vmap, state.reg_opts)
    except (InsufficientOverlap, Diverged):
        return None
    return pose_a.inverse().compose(res.pose)


def _closest_body_pose(camera_body_poses, timestamp):
    best = None
    best_dt = np.inf
    for ts, pose in camera_body_poses:
        dt = abs(ts - timestamp)
        if dt < best_dt:
            best_dt = dt
            best = pose
    return best


def _adjoint(pose: Pose) -> np.ndarray:
    A = np.zeros((6, 6))
    A[:3, :3] = pose.rotation
    A[3:, 3:] = pose.rotation
    A[3:, :3] = so3_hat(pose.translation) @ pose.rotation
    return A


def _ad_se3(xi) -> np.ndarray:
    W = so3_hat(xi[:3])
    V = so3_hat(xi[3:])
    A = np.zeros((6, 6))
    A[:3, :3] = W
    A[3:, 3:] = W
    A[3:, :3] = V
    return A


def _right_jacobian_inv(r) -> np.ndarray:
    ad = _ad_se3(r)
    return np.eye(6) + 0.5 * ad + (ad @ ad) / 12.0


@dataclass
class PoseGraphOptions:
    max_iterations: int = 50
    cost_tol: float = 1e-10
    damping_init: float = 1e-8
    damping_scale: float = 10.0
    max_retries: int = 12


def optimize_pose_graph(graph: PoseGraph, anchors,
                        opts: PoseGraphOptions | None = None) -> dict:
    """Minimize the weighted relative-pose mismatch over all edges.

    Returns the updated world-from-node poses (also written back into the
    graph). Anchored nodes stay fixed.
    """
    opts = opts or PoseGraphOptions()
    anchors = set(anchors)
    if not anchors:
        raise GaugeError("anchor at least one node")
    if not graph.connected():
        raise DisconnectedGraph("cannot optimize a disconnected graph")
    free = [n for n in sorted(graph.nodes) if n not in anchors]
    slot = {n: k for k, n in enumerate(free)}
    poses = dict(graph.nodes)

    def total_cost(ps):
        c = 0.0
        for e in graph.edges:
            r = se3_log(e.relative.inverse().compose(
                ps[e.a].inverse()).compose(ps[e.b]))
            c += float(r @ e.information @ r)
        return c

    cost = total_cost(poses)
    lam = opts.damping_init
    n = 6 * len(free)
    for _ in range(opts.max_iterations):
        if n == 0:
            break
        H = np.zeros((n, n))
        g = np.zeros(n)
        for e in graph.edges:
            X_a, X_b = poses[e.a], poses[e.b]
            r = se3_log(e.relative.inverse().compose(X_a.inverse()).compose(X_b))
            Jr = _right_jacobian_inv(r) @ _adjoint(X_b.inverse())
            sa, sb = slot.get(e.a), slot.get(e.b)
            Lr = e.information @ r
            if sb is not None:
                H[6 * sb:6 * sb + 6, 6 * sb:6 * sb + 6] += Jr.T @ e.information @ Jr
                g[6 * sb:6 * sb + 6] += Jr.T @ Lr
            if sa is not None:
                H[6 * sa:6 * sa + 6, 6 * sa:6 * sa + 6] += Jr.T @ e.information @ Jr
                g[6 * sa:6 * sa + 6] -= Jr.T @ Lr
            if sa is not None and sb is not None:
                blk = -Jr.T @ e.information @ Jr
                H[6 * sa:6 * sa + 6, 6 * sb:6 * sb + 6] += blk
                H[6 * sb:6 * sb + 6, 6 * sa:6 * sa + 6] += blk.T
        accepted = False
        last_step = np.inf
        best_trial = np.inf
        floor = max(np.trace(H) / max(n, 1), 1e-12) * 1e-3
        for _retry in range(opts.max_retries):
            A = H + lam * (np.diag(np.diag(H)) + floor * np.eye(n))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= opts.damping_scale
                continue
            last_step = float(np.linalg.norm(delta))
            trial = dict(poses)
            for node, k in slot.items():
                trial[node] = se3_exp(delta[6 * k:6 * k + 6]).compose(poses[node])
            tcost = total_cost(trial)
            best_trial = min(best_trial, tcost)
            if tcost < cost:
                poses = trial
                prev_cost, cost = cost, tcost
                lam = max(lam / opts.damping_scale, 1e-15)
                accepted = True
                break
            if last_step < 1e-14:
                break
            lam *= opts.damping_scale
        if not accepted:
            if (best_trial - cost) <= opts.cost_tol * max(cost, 1e-300) \
                    or last_step < 1e-12 or cost < 1e-24:
                break
            raise SolverFailed("pose graph made no progress")
        if (prev_cost - cost) < opts.cost_tol * max(prev_cost, 1e-300):
            break
    graph.nodes.update(poses)
    return poses
