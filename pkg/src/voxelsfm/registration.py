"""Frame-to-model LiDAR pose estimation against the Gaussian voxel map,
plus the alternating visual/LiDAR frame scheduler.

The per-point cost is w(u) * (1 - exp(-d^2/e)) where d is the signed
distance along the voxel normal (minimum eigenvector) and e the floored
minimum eigenvalue: a Welsch-profile robust distance. Registration
minimizes the frame sum with damped Gauss-Newton, realizing the robust
profile through iteratively reweighted least squares. Voxels are
re-associated every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Diverged, Exhausted, ImmatureVoxel, InsufficientOverlap
from .geom import Pose, rotation_angle, se3_exp
from .voxelmap import VoxelMap, VoxelNode


@dataclass
class LidarFrame:
    """A timestamped scan: local points (N, 3) with intensities in [0, 255]."""

    frame_index: int
    timestamp: float
    points: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.intensities = np.asarray(self.intensities, dtype=float).reshape(-1)
        if self.points.shape[0] < 1:
            raise ValueError("a LiDAR frame needs at least one point")
        if self.intensities.shape[0] != self.points.shape[0]:
            raise ValueError("intensity count must match point count")
        if self.intensities.min() < 0 or self.intensities.max() > 255:
            raise ValueError("intensities must lie in [0, 255]")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class RegistrationOptions:
    max_iterations: int = 50
    step_tol: float = 1e-6
    cost_tol: float = 1e-8
    damping_init: float = 1e-4
    damping_scale: float = 10.0
    max_retries: int = 22
    overlap_min: float = 0.10
    # Graduated non-convexity: the Welsch scale starts at gnc_start meters
    # and shrinks by gnc_factor per accepted step until it reaches the true
    # voxel eigenvalues. Widens the capture basin far beyond sqrt(e3);
    # set gnc_start = 0 to run plain IRLS from the first iteration.
    gnc_start: float = 0.5
    gnc_factor: float = 0.5
    # Voxel re-association makes the cost piecewise; an all-trials increase
    # below this relative bound counts as stationary, not divergence.
    stall_tol: float = 1e-3


@dataclass
class RegistrationResult:
    pose: Pose
    final_cost: float
    inlier_fraction: float
    iterations: int
    converged: bool
    initial_cost: float = 0.0


def intensity_weight(u):
    """Intensity reliability weight in [0, 1): 1 - exp(-u^2/100)."""
    u = np.asarray(u, dtype=float)
    return 1.0 - np.exp(-(u * u) / 100.0)


def point_to_gaussian_cost(x_l, intensity, pose: Pose, node: VoxelNode,
                           eig_floor: float = 1e-6,
                           min_points: int = 10) -> float:
    """Single-point cost against one voxel node. The quadratic form of the
    normal-projected offset against the inverse covariance collapses to
    d^2 / max(e3, eig_floor)."""
    if node.count < min_points:
        raise ImmatureVoxel(f"node has {node.count} < {min_points} points")
    es = node.eigensystem()
    x_w = pose.apply(np.asarray(x_l, dtype=float))
    d = float(es.normal @ (x_w - node.stats.mean))
    e = max(es.values[2], eig_floor)
    w = float(intensity_weight(intensity))
    return w * (1.0 - np.exp(-d * d / e))


def point_to_gaussian_grad(x_l, intensity, pose: Pose, node: VoxelNode,
                           eig_floor: float = 1e-6,
                           min_points: int = 10):
    """Cost and its analytic gradient w.r.t. a left-perturbation twist
    (rotation part first)."""
    if node.count < min_points:
        raise ImmatureVoxel(f"node has {node.count} < {min_points} points")
    es = node.eigensystem()
    n = es.normal
    x_w = pose.apply(np.asarray(x_l, dtype=float))
    d = float(n @ (x_w - node.stats.mean))
    e = max(es.values[2], eig_floor)
    w = float(intensity_weight(intensity))
    s = d * d / e
    cost = w * (1.0 - np.exp(-s))
    # d(dist)/d(twist) = [x_w x n, n]; chain through w * (1 - exp(-d^2/e)).
    jd = np.concatenate([np.cross(x_w, n), n])
    grad = w * np.exp(-s) * (2.0 * d / e) * jd
    return cost, grad


def _associate_full(points_l, weights, pose, vmap, time_weights=None):
    """Associate a frame to the map at a pose.

    Returns world points, matched indices, voxel normals/means collapsed to
    the scalar residual pieces (d, e), effective weights, the coverage,
    and the summed weight of unmatched points (their saturated cost).
    """
    x_w = pose.apply(points_l)
    bq = vmap.batch_query(x_w)
    idx = np.nonzero(bq.matched)[0]
    ni = bq.node_index[idx]
    normal = bq.normal[ni]
    e = bq.e3_floored[ni]
    d = np.einsum("ij,ij->i", normal, x_w[idx] - bq.mean[ni])
    w = weights[idx]
    if time_weights is not None:
        w = w * time_weights(bq.creation_time[ni])
    unmatched_w = float(weights.sum() - weights[idx].sum())
    return x_w, idx, normal, e, d, w, bq.coverage(), unmatched_w


def frame_cost(frame: LidarFrame, pose: Pose, vmap: VoxelMap):
    """Total Welsch cost of a frame plus per-point terms.

    Points whose voxel is absent or immature contribute zero; the returned
    mask marks the contributing points.
    """
    weights = intensity_weight(frame.intensities)
    x_w, idx, _, e, d, w, coverage, _ = _associate_full(
        frame.points, weights, pose, vmap)
    per_point = np.zeros(len(frame))
    per_point[idx] = w * (1.0 - np.exp(-(d * d) / e))
    matched = np.zeros(len(frame), dtype=bool)
    matched[idx] = True
    return float(per_point.sum()), per_point, matched


def _welsch_cost(d, e, w, anneal, unmatched_w):
    """Welsch frame cost at an annealed scale plus the true-scale cost.

    Unmatched points count at their saturated cost w (the limit of the
    profile), so a trial step cannot look better by pushing points out of
    the map.
    """
    true = float(np.sum(w * (1.0 - np.exp(-(d * d) / e)))) + unmatched_w
    if anneal <= 0.0:
        return true, true
    e_eff = np.maximum(e, anneal * anneal)
    surr = float(np.sum(w * (1.0 - np.exp(-(d * d) / e_eff)))) + unmatched_w
    return surr, true


def register_lidar_frame(frame: LidarFrame, init_pose: Pose, vmap: VoxelMap,
                         opts: RegistrationOptions | None = None,
                         time_weights=None) -> RegistrationResult:
    """Estimate the frame pose by minimizing the Welsch frame cost.

    Damped Gauss-Newton with IRLS weights and a graduated scale: early
    iterations evaluate the robust profile at a coarse scale to stay
    informative far from the optimum, and the scale shrinks until the
    iterations run on the exact cost. Association is refreshed every
    iteration and for every trial step, and points that leave the map are
    charged their saturated weight, so accepted steps never increase the
    cost at the scale they were judged at; final-stage accepted steps
    never increase the true frame cost.
    """
    opts = opts or RegistrationOptions()
    pts = frame.points
    weights = intensity_weight(frame.intensities)

    def associate(pose):
        return _associate_full(pts, weights, pose, vmap, time_weights)

    pose = init_pose
    x_w, idx, normal, e, d, w, coverage, unmatched_w = associate(pose)
    if coverage < opts.overlap_min:
        raise InsufficientOverlap(
            f"coverage {coverage:.3f} below {opts.overlap_min:.3f}")
    anneal = opts.gnc_start
    if anneal > 0 and len(e) and anneal * anneal <= e.min():
        anneal = 0.0
    cost, true_cost = _welsch_cost(d, e, w, anneal, unmatched_w)
    initial_cost = true_cost
    lam = opts.damping_init
    iterations = 0
    converged = False
    for _ in range(opts.max_iterations):
        iterations += 1
        e_eff = np.maximum(e, anneal * anneal) if anneal > 0 else e
        s = (d * d) / e_eff
        kappa = w * np.exp(-s) / e_eff
        J = np.empty((len(idx), 6))
        J[:, :3] = np.cross(x_w[idx], normal)
        J[:, 3:] = normal
        H = J.T @ (kappa[:, None] * J)
        g = J.T @ (kappa * d)
        accepted = False
        last_step_norm = np.inf
        best_trial_cost = np.inf
        # Absolute damping floor: keeps directions with a singular diagonal
        # (e.g. one dominant wall orientation) from blowing up the step.
        floor = max(np.trace(H) / 6.0, 1e-12) * 1e-3
        for _retry in range(opts.max_retries):
            A = H + lam * (np.diag(np.diag(H)) + floor * np.eye(6))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= opts.damping_scale
                continue
            last_step_norm = float(np.linalg.norm(delta))
            trial = se3_exp(delta).compose(pose)
            tx_w, tidx, tnormal, te, td, tw, tcov, tunm = associate(trial)
            tcost, ttrue = _welsch_cost(td, te, tw, anneal, tunm)
            best_trial_cost = min(best_trial_cost, tcost)
            if tcost < cost:
                pose = trial
                x_w, idx, normal, e, d, w, coverage, unmatched_w = (
                    tx_w, tidx, tnormal, te, td, tw, tcov, tunm)
                prev_cost, cost, true_cost = cost, tcost, ttrue
                lam = max(lam / opts.damping_scale, 1e-12)
                accepted = True
                break
            if last_step_norm < opts.step_tol:
                break  # damping further only shrinks an already-tiny step
            lam *= opts.damping_scale
        if anneal > 0:
            # Shrink the scale whether or not this scale made progress.
            anneal *= opts.gnc_factor
            if len(e) and anneal * anneal <= e.min():
                anneal = 0.0
            cost, true_cost = _welsch_cost(d, e, w, anneal, unmatched_w)
            continue
        if not accepted:
            stationary = (last_step_norm < opts.step_tol
                          or (best_trial_cost - cost)
                          <= opts.stall_tol * max(cost, 1e-300))
            if stationary:
                converged = True
                break
            raise Diverged("cost increased across all damping retries")
        if last_step_norm < opts.step_tol:
            converged = True
            break
        if (prev_cost - cost) < opts.cost_tol * max(prev_cost, 1e-300):
            converged = True
            break
    return RegistrationResult(pose.with_timestamp(frame.timestamp), true_cost,
                              coverage, iterations, converged, initial_cost)


@dataclass
class SelectionState:
    """Snapshot used by the frame scheduler.

    ``visual_scores`` maps unregistered visual frame ids to their count of
    matches against triangulated map points. ``predicted_pose`` returns the
    camera-derived initial LiDAR pose for a (lidar_id, visual_id) pair.
    """

    visual_scores: dict
    visual_times: dict
    lidar_times: dict                 # unregistered LiDAR frame id -> timestamp
    registered_lidar: list            # list of (frame_id, Pose)
    predicted_pose: object            # callable (lidar_id, visual_id) -> Pose
    max_angle_deg: float = 60.0


def select_next_frames(state: SelectionState):
    """Pick the best-matching visual frame and the time-closest unregistered
    LiDAR frame, deferring the LiDAR slot when its predicted orientation is
    more than the gate angle away from the nearest registered frame."""
    candidates = [(fid, s) for fid, s in state.visual_scores.items() if s > 0]
    if not candidates:
        raise Exhausted("no unregistered visual frame matches the map")
    candidates.sort(key=lambda p: (-p[1], p[0]))
    visual_id = candidates[0][0]
    if not state.lidar_times:
        return visual_id, None
    t_v = state.visual_times[visual_id]
    lidar_id = min(state.lidar_times,
                   key=lambda fid: (abs(state.lidar_times[fid] - t_v), fid))
    if state.registered_lidar:
        pred = state.predicted_pose(lidar_id, visual_id)
        nearest = min(state.registered_lidar,
                      key=lambda fp: np.linalg.norm(fp[1].translation
                                                    - pred.translation))
        angle = np.degrees(rotation_angle(nearest[1].rotation.T @ pred.rotation))
        if angle > state.max_angle_deg:
            return visual_id, None
    return visual_id, lidar_id
