"""Global joint LiDAR-visual bundle adjustment and the incremental
voxel-map refresh that follows it.

The energy is the sum of squared reprojection residuals over all tracks
and the time-weighted Welsch voxel residuals of all LiDAR frames plus the
map-point-to-voxel coupling terms. The voxel map is held fixed while the
solver iterates; pose changes are folded back into the map afterwards by
a strict two-phase refresh (all deletions with old poses first, then all
additions with new poses).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GaugeError, SolverFailed
from .geom import Pose, se3_exp
from .registration import intensity_weight
from .voxelmap import VoxelMap


def time_weight(delta_t, inverted: bool = False):
    """Residual weight from the frame-index gap to the voxel creation time.

    Decays from just under 15 at zero gap towards 1, and is clamped at 15.
    ``inverted`` mirrors the profile (16 - w) into an increasing one with
    the same range, for experiments that emphasize long-gap voxels instead.
    """
    delta_t = np.asarray(delta_t, dtype=float)
    w = np.minimum(38.0 * np.exp(-(delta_t / 25.0 + 1.0)) + 1.0, 15.0)
    if inverted:
        w = 16.0 - w
    return w if w.ndim else float(w)


def weighted_point_cost(x_l, intensity, pose: Pose, node, current_frame_index: int,
                        eig_floor: float = 1e-6, min_points: int = 10,
                        inverted: bool = False) -> float:
    """Time-weighted single-point voxel cost used during bundle adjustment."""
    from .registration import point_to_gaussian_cost

    base = point_to_gaussian_cost(x_l, intensity, pose, node, eig_floor, min_points)
    dt = abs(int(current_frame_index) - int(node.creation_time))
    return float(time_weight(dt, inverted)) * base


def mappoint_voxel_cost(x_k, vmap: VoxelMap) -> float:
    """Voxel residual of a visual map point with unit intensity weight.

    Points outside any mature voxel contribute nothing.
    """
    hit = vmap.query(x_k)
    if hit is None or not hit.mature:
        return 0.0
    es = hit.node.eigensystem()
    d = float(es.normal @ (np.asarray(x_k, dtype=float) - hit.node.stats.mean))
    e = max(es.values[2], vmap.config.eig_floor)
    return 1.0 - float(np.exp(-d * d / e))


@dataclass
class LidarBlock:
    """One LiDAR frame inside the bundle problem."""

    frame_index: int
    reg_index: int                    # registration order, drives time weights
    points: np.ndarray                # local coordinates
    intensities: np.ndarray
    pose: Pose                        # lidar-to-world


@dataclass
class BundleOptions:
    max_iterations: int = 30
    cost_tol: float = 1e-8
    damping_init: float = 1e-6
    damping_scale: float = 10.0
    max_retries: int = 18
    huber_px: float | None = None     # robust reprojection loss, off by default
    use_time_weight: bool = True
    time_weight_inverted: bool = False
    mappoint_voxel: bool = True
    # Voxel association makes the energy piecewise: at the basin floor a
    # handful of points hopping cells can raise every trial step by a hair.
    # Treat an all-trials increase below this relative bound as stationary.
    stall_tol: float = 1e-3
    # Graduated Welsch scale for the voxel terms, as in registration: keeps
    # the LiDAR residuals informative when initial pose errors exceed the
    # voxel eigenvalue scale. Set to 0 to optimize the exact profile only.
    gnc_start: float = 0.25
    gnc_factor: float = 0.5


@dataclass
class BundleProblem:
    """Variable and residual blocks for one joint adjustment.

    Camera poses live on the frames, LiDAR poses on the blocks, and the
    structure on the map points; all are updated in place by the solver.
    At least one camera or LiDAR pose must be anchored.
    """

    cameras: dict                      # frame_index -> VisualFrame (posed)
    map_points: dict                   # feature_id -> MapPoint
    lidar: list = field(default_factory=list)   # LidarBlock
    vmap: VoxelMap | None = None
    fixed_cameras: set = field(default_factory=set)
    fixed_lidar: set = field(default_factory=set)
    scale_anchor: int | None = None    # camera whose |t| pins the visual gauge

    def observations(self):
        """(frame_index, feature_id, MapPoint) triplets with live frames."""
        for fid in sorted(self.map_points):
            mp = self.map_points[fid]
            for frame_index, feature_id in mp.track:
                frame = self.cameras.get(frame_index)
                if frame is None or frame.pose is None:
                    continue
                if feature_id in frame.observations:
                    yield frame_index, feature_id, fid


@dataclass
class BundleReport:
    initial_energy: float
    final_energy: float
    initial_visual: float
    initial_lidar: float
    final_visual: float
    final_lidar: float
    iterations: int
    converged: bool
    accepted_energies: list = field(default_factory=list)
    log_lines: list = field(default_factory=list)


class _Assembler:
    """Flattens the problem into index maps and evaluates energy/systems."""

    def __init__(self, problem: BundleProblem, opts: BundleOptions):
        self.problem = problem
        self.opts = opts
        self.cam_ids = [i for i in sorted(problem.cameras)
                        if problem.cameras[i].pose is not None
                        and i not in problem.fixed_cameras]
        self.lidar_ids = [b.frame_index for b in problem.lidar
                          if b.frame_index not in problem.fixed_lidar]
        self.point_ids = sorted(problem.map_points)
        self.cam_slot = {i: k for k, i in enumerate(self.cam_ids)}
        self.lidar_slot = {i: len(self.cam_ids) + k
                           for k, i in enumerate(self.lidar_ids)}
        self.pt_slot = {i: k for k, i in enumerate(self.point_ids)}
        self.n_pose = 6 * (len(self.cam_ids) + len(self.lidar_ids))
        self.obs = list(problem.observations())
        self.obs_by_frame = {}
        for frame_index, feature_id, fid in self.obs:
            self.obs_by_frame.setdefault(frame_index, []).append((feature_id, fid))

    # -- energy -------------------------------------------------------------

    def visual_energy(self, cam_poses, points):
        total = 0.0
        k = self.opts.huber_px
        for frame_index, items in self.obs_by_frame.items():
            frame = self.problem.cameras[frame_index]
            pose = cam_poses[frame_index]
            xs = np.array([points[fid] for _, fid in items])
            uv = np.array([frame.observations[feat] for feat, _ in items])
            y = pose.apply(xs)
            ok = y[:, 2] > 1e-9
            z = np.where(ok, y[:, 2], 1.0)
            px = np.column_stack([frame.fu * y[:, 0] / z + frame.cu,
                                  frame.fv * y[:, 1] / z + frame.cv])
            r2 = np.sum((px - uv) ** 2, axis=1)
            r2 = np.where(ok, r2, 0.0)
            if k is None:
                total += float(r2.sum())
            else:
                r = np.sqrt(r2)
                quad = r <= k
                total += float(np.sum(np.where(quad, r2, 2 * k * r - k * k)))
        return total

    def lidar_energy(self, lidar_poses, points, anneal=0.0):
        problem, opts = self.problem, self.opts
        if problem.vmap is None:
            return 0.0
        total = 0.0
        for block in problem.lidar:
            pose = lidar_poses[block.frame_index]
            w_int = intensity_weight(block.intensities)
            x_w = pose.apply(block.points)
            bq = problem.vmap.batch_query(x_w)
            idx = np.nonzero(bq.matched)[0]
            ni = bq.node_index[idx]
            d = np.einsum("ij,ij->i", bq.normal[ni], x_w[idx] - bq.mean[ni])
            e = bq.e3_floored[ni]
            if anneal > 0:
                e = np.maximum(e, anneal * anneal)
            w = w_int[idx]
            if opts.use_time_weight:
                dt = np.abs(block.reg_index - bq.creation_time[ni])
                w = w * time_weight(dt, opts.time_weight_inverted)
            total += float(np.sum(w * (1.0 - np.exp(-(d * d) / e))))
            # Out-of-map points at their saturated weight, keeping accepted
            # steps comparable when coverage shifts.
            total += float(w_int.sum() - w_int[idx].sum())
        if opts.mappoint_voxel and self.point_ids:
            xs = np.array([points[fid] for fid in self.point_ids])
            bq = problem.vmap.batch_query(xs)
            idx = np.nonzero(bq.matched)[0]
            ni = bq.node_index[idx]
            d = np.einsum("ij,ij->i", bq.normal[ni], xs[idx] - bq.mean[ni])
            e = bq.e3_floored[ni]
            if anneal > 0:
                e = np.maximum(e, anneal * anneal)
            total += float(np.sum(1.0 - np.exp(-(d * d) / e)))
        return total

    def snapshot(self):
        cam_poses = {i: f.pose for i, f in self.problem.cameras.items()
                     if f.pose is not None}
        lidar_poses = {b.frame_index: b.pose for b in self.problem.lidar}
        points = {fid: self.problem.map_points[fid].position.copy()
                  for fid in self.point_ids}
        return cam_poses, lidar_poses, points

    def energy(self, cam_poses, lidar_poses, points, anneal=0.0):
        ev = self.visual_energy(cam_poses, points)
        el = self.lidar_energy(lidar_poses, points, anneal)
        return ev + el, ev, el

    def min_voxel_eig(self):
        if self.problem.vmap is None:
            return 0.0
        return self.problem.vmap.config.eig_floor

    # -- normal equations ----------------------------------------------------

    def build_system(self, cam_poses, lidar_poses, points, anneal=0.0):
        n_pose = self.n_pose
        P = len(self.point_ids)
        Hpp = np.zeros((n_pose, n_pose))
        gp = np.zeros(n_pose)
        Hxx = np.zeros((P, 3, 3))
        gx = np.zeros((P, 3))
        B = np.zeros((n_pose, 3 * P)) if P else np.zeros((n_pose, 0))
        k = self.opts.huber_px

        for frame_index, items in self.obs_by_frame.items():
            frame = self.problem.cameras[frame_index]
            pose = cam_poses[frame_index]
            pts_idx = np.array([self.pt_slot[fid] for _, fid in items])
            xs = np.array([points[fid] for _, fid in items])
            uv = np.array([frame.observations[feat] for feat, _ in items])
            y = pose.apply(xs)
            ok = y[:, 2] > 1e-9
            if not ok.any():
                continue
            y = y[ok]
            uv = uv[ok]
            pts_idx = pts_idx[ok]
            m = len(y)
            z = y[:, 2]
            px = np.column_stack([frame.fu * y[:, 0] / z + frame.cu,
                                  frame.fv * y[:, 1] / z + frame.cv])
            r = px - uv
            J_pi = np.zeros((m, 2, 3))
            J_pi[:, 0, 0] = frame.fu / z
            J_pi[:, 0, 2] = -frame.fu * y[:, 0] / z ** 2
            J_pi[:, 1, 1] = frame.fv / z
            J_pi[:, 1, 2] = -frame.fv * y[:, 1] / z ** 2
            if k is not None:
                rn = np.linalg.norm(r, axis=1)
                wts = np.where(rn <= k, 1.0, k / np.maximum(rn, 1e-12))
            else:
                wts = np.ones(m)
            J_pt = np.einsum("nij,jk->nik", J_pi, pose.rotation)
            slot = self.cam_slot.get(frame_index)
            if slot is not None:
                hat = np.zeros((m, 3, 3))
                hat[:, 0, 1] = -y[:, 2]
                hat[:, 0, 2] = y[:, 1]
                hat[:, 1, 0] = y[:, 2]
                hat[:, 1, 2] = -y[:, 0]
                hat[:, 2, 0] = -y[:, 1]
                hat[:, 2, 1] = y[:, 0]
                J_pose = np.zeros((m, 2, 6))
                J_pose[:, :, :3] = np.einsum("nij,njk->nik", J_pi, -hat)
                J_pose[:, :, 3:] = J_pi
                r0 = slot * 6
                Hpp[r0:r0 + 6, r0:r0 + 6] += np.einsum(
                    "nij,n,nik->jk", J_pose, wts, J_pose)
                gp[r0:r0 + 6] += np.einsum("nij,n,ni->j", J_pose, wts, r)
                C = np.einsum("nij,n,nik->njk", J_pose, wts, J_pt)  # (m,6,3)
                for t in range(m):
                    c0 = 3 * pts_idx[t]
                    B[r0:r0 + 6, c0:c0 + 3] += C[t]
            np.add.at(Hxx, pts_idx,
                      np.einsum("nij,n,nik->njk", J_pt, wts, J_pt))
            np.add.at(gx, pts_idx, np.einsum("nij,n,ni->nj", J_pt, wts, r))

        if self.problem.vmap is not None:
            for block in self.problem.lidar:
                slot = self.lidar_slot.get(block.frame_index)
                pose = lidar_poses[block.frame_index]
                w_int = intensity_weight(block.intensities)
                x_w = pose.apply(block.points)
                bq = self.problem.vmap.batch_query(x_w)
                idx = np.nonzero(bq.matched)[0]
                if len(idx) == 0 or slot is None:
                    continue
                ni = bq.node_index[idx]
                normal = bq.normal[ni]
                e = bq.e3_floored[ni]
                if anneal > 0:
                    e = np.maximum(e, anneal * anneal)
                d = np.einsum("ij,ij->i", normal, x_w[idx] - bq.mean[ni])
                w = w_int[idx]
                if self.opts.use_time_weight:
                    dt = np.abs(block.reg_index - bq.creation_time[ni])
                    w = w * time_weight(dt, self.opts.time_weight_inverted)
                kappa = w * np.exp(-(d * d) / e) / e
                J = np.empty((len(idx), 6))
                J[:, :3] = np.cross(x_w[idx], normal)
                J[:, 3:] = normal
                r0 = slot * 6
                Hpp[r0:r0 + 6, r0:r0 + 6] += J.T @ (kappa[:, None] * J)
                gp[r0:r0 + 6] += J.T @ (kappa * d)
            if self.opts.mappoint_voxel and self.point_ids:
                xs = np.array([points[fid] for fid in self.point_ids])
                bq = self.problem.vmap.batch_query(xs)
                idx = np.nonzero(bq.matched)[0]
                if len(idx):
                    ni = bq.node_index[idx]
                    normal = bq.normal[ni]
                    e = bq.e3_floored[ni]
                    if anneal > 0:
                        e = np.maximum(e, anneal * anneal)
                    d = np.einsum("ij,ij->i", normal, xs[idx] - bq.mean[ni])
                    kappa = np.exp(-(d * d) / e) / e
                    np.add.at(Hxx, idx,
                              kappa[:, None, None]
                              * np.einsum("ni,nj->nij", normal, normal))
                    np.add.at(gx, idx, (kappa * d)[:, None] * normal)
        return Hpp, gp, Hxx, gx, B


def _solve_lm(Hpp, gp, Hxx, gx, B, lam):
    n_pose = Hpp.shape[0]
    P = Hxx.shape[0]
    floor = max(np.trace(Hpp) / max(n_pose, 1), 1e-9) * 1e-3
    Hpp_aug = Hpp + lam * (np.diag(np.diag(Hpp)) + floor * np.eye(n_pose)) \
        + 1e-12 * np.eye(n_pose)
    if P == 0:
        dp = np.linalg.solve(Hpp_aug, -gp)
        return dp, np.zeros((0, 3))
    Hxx_aug = Hxx.copy()
    for i in range(3):
        Hxx_aug[:, i, i] = Hxx[:, i, i] * (1.0 + lam) + 1e-12
    Hxx_inv = np.linalg.inv(Hxx_aug)
    W = B.reshape(n_pose, P, 3)
    BHinv = np.einsum("ipk,pkl->ipl", W, Hxx_inv)
    S = Hpp_aug - np.einsum("ipl,jpl->ij", BHinv, W)
    rhs = -gp + np.einsum("ipl,pl->i", BHinv, gx)
    dp = np.linalg.solve(S, rhs)
    dx = -np.einsum("pkl,pl->pk", Hxx_inv,
                    gx + np.einsum("ipk,i->pk", W, dp))
    return dp, dx


def joint_ba(problem: BundleProblem, opts: BundleOptions | None = None) -> BundleReport:
    """Damped Gauss-Newton over all camera poses, LiDAR poses, and map
    points; the voxel map stays frozen throughout.

    Updates the problem's frames, blocks, and points in place. Raises
    SolverFailed when no damping level yields progress away from a
    stationary point, and GaugeError when nothing is anchored.
    """
    opts = opts or BundleOptions()
    if not problem.fixed_cameras and not problem.fixed_lidar:
        raise GaugeError("anchor at least one pose before adjusting")
    asm = _Assembler(problem, opts)
    cam_poses, lidar_poses, points = asm.snapshot()
    if not asm.obs and not problem.lidar:
        raise SolverFailed("problem has no residuals")
    scale_ref = None
    if problem.scale_anchor is not None and problem.vmap is None:
        ref_pose = cam_poses.get(problem.scale_anchor)
        if ref_pose is not None:
            scale_ref = float(np.linalg.norm(ref_pose.translation))

    anneal = opts.gnc_start if (problem.vmap is not None and problem.lidar) else 0.0
    eig_floor = asm.min_voxel_eig()
    if anneal > 0 and anneal * anneal <= eig_floor:
        anneal = 0.0
    E, ev, el = asm.energy(cam_poses, lidar_poses, points, anneal)
    true_E, true_ev, true_el = ((E, ev, el) if anneal == 0.0
                                else asm.energy(cam_poses, lidar_poses, points))
    report = BundleReport(true_E, true_E, true_ev, true_el, true_ev, true_el,
                          0, False, [true_E])
    lam = opts.damping_init
    for it in range(1, opts.max_iterations + 1):
        report.iterations = it
        Hpp, gp, Hxx, gx, B = asm.build_system(cam_poses, lidar_poses, points, anneal)
        accepted = False
        last_step = np.inf
        best_trial = np.inf
        for _ in range(opts.max_retries):
            try:
                dp, dx = _solve_lm(Hpp, gp, Hxx, gx, B, lam)
            except np.linalg.LinAlgError:
                lam *= opts.damping_scale
                continue
            last_step = float(np.sqrt(np.sum(dp ** 2) + np.sum(dx ** 2)))
            t_cam = {i: (se3_exp(dp[6 * s:6 * s + 6]).compose(cam_poses[i])
                         if (s := asm.cam_slot.get(i)) is not None else cam_poses[i])
                     for i in cam_poses}
            t_lidar = {i: (se3_exp(dp[6 * s:6 * s + 6]).compose(lidar_poses[i])
                           if (s := asm.lidar_slot.get(i)) is not None else lidar_poses[i])
                       for i in lidar_poses}
            t_points = {fid: points[fid] + dx[asm.pt_slot[fid]]
                        for fid in points}
            if scale_ref is not None and scale_ref > 0:
                t_cam, t_points = _renormalize_scale(
                    t_cam, t_points, problem.scale_anchor, scale_ref)
            tE, tev, tel = asm.energy(t_cam, t_lidar, t_points, anneal)
            best_trial = min(best_trial, tE)
            if tE < E:
                cam_poses, lidar_poses, points = t_cam, t_lidar, t_points
                prev_E, E, ev, el = E, tE, tev, tel
                lam = max(lam / opts.damping_scale, 1e-15)
                accepted = True
                break
            if last_step < 1e-14:
                break
            lam *= opts.damping_scale
        if accepted:
            true_E, true_ev, true_el = ((E, ev, el) if anneal == 0.0 else
                                        asm.energy(cam_poses, lidar_poses, points))
            report.accepted_energies.append(true_E)
        report.log_lines.append(
            "BA iter=%d E=%.9g E_I=%.9g E_L=%.9g damping=%.3g step=%.3g "
            "anneal=%.3g accepted=%d"
            % (it, true_E, true_ev, true_el, lam, last_step, anneal,
               int(accepted)))
        if anneal > 0:
            anneal *= opts.gnc_factor
            if anneal * anneal <= eig_floor:
                anneal = 0.0
            E, ev, el = asm.energy(cam_poses, lidar_poses, points, anneal)
            continue
        if not accepted:
            if ((best_trial - E) <= opts.stall_tol * max(E, 1e-300)
                    or last_step < 1e-12):
                report.converged = True
                break
            raise SolverFailed("no damping level decreased the energy")
        if (prev_E - E) < opts.cost_tol * max(prev_E, 1e-300):
            report.converged = True
            break
    # Fold the solution back into the problem objects.
    for i, frame in problem.cameras.items():
        if frame.pose is not None:
            frame.pose = cam_poses[i]
    for block in problem.lidar:
        block.pose = lidar_poses[block.frame_index]
    for fid in asm.point_ids:
        problem.map_points[fid].position = points[fid]
    report.final_energy = true_E
    report.final_visual = true_ev
    report.final_lidar = true_el
    return report


def _renormalize_scale(cam_poses, points, anchor, scale_ref):
    t = cam_poses[anchor].translation
    norm = float(np.linalg.norm(t))
    if norm < 1e-12:
        return cam_poses, points
    s = scale_ref / norm
    if abs(s - 1.0) < 1e-15:
        return cam_poses, points
    new_cams = {i: Pose(p.rotation, p.translation * s, p.timestamp)
                for i, p in cam_poses.items()}
    new_points = {fid: x * s for fid, x in points.items()}
    return new_cams, new_points


@dataclass
class FrameRefresh:
    """Old/new pose pair for one LiDAR frame, with its absorbed mask."""

    frame_index: int
    reg_index: int
    points: np.ndarray
    intensities: np.ndarray
    old_pose: Pose
    new_pose: Pose
    absorbed: np.ndarray


@dataclass
class VoxelRefreshPlan:
    frames: list


@dataclass
class RefreshReport:
    deleted: int
    added: int
    missing: dict  # frame_index -> list of point indices that had no voxel


def refresh_voxel_map(vmap: VoxelMap, plan: VoxelRefreshPlan) -> RefreshReport:
    """Two-phase incremental update after pose changes.

    Every frame's previously absorbed points are deleted at their old-pose
    positions first; only when all deletions are done are the frames
    re-added at their new poses. Each frame's absorbed mask is replaced by
    the new insertion outcome. Missing voxels are reported per point and
    do not abort the refresh.
    """
    missing = {}
    deleted = 0
    for fr in plan.frames:
        old_w = fr.old_pose.apply(fr.points)
        miss = vmap.remove_frame(old_w, fr.absorbed)
        deleted += int(np.count_nonzero(fr.absorbed)) - len(miss)
        if miss:
            missing[fr.frame_index] = miss
    added = 0
    for fr in plan.frames:
        new_w = fr.new_pose.apply(fr.points)
        fr.absorbed = vmap.insert_frame(new_w, fr.intensities, fr.reg_index)
        fr.old_pose = fr.new_pose
        added += int(np.count_nonzero(fr.absorbed))
    return RefreshReport(deleted, added, missing)
