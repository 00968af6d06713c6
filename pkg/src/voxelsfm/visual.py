"""Sparse visual map machinery: feature tracks, triangulation, PnP
registration, two-view initialization, and the LiDAR-pair ICP + similarity
alignment bootstrap.

Conventions: a camera pose maps world points into camera coordinates
(projection applies the pose directly); a LiDAR pose maps scan-local
points into the world. Extrinsics map camera coordinates into the LiDAR
body frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    BehindCamera,
    ConsensusFailed,
    DegenerateBaseline,
    DegenerateGeometry,
    DegenerateInput,
    IcpDiverged,
    TooFewCorrespondences,
)
from .geom import Pose, Similarity, project_pinhole, se3_exp, umeyama_align


@dataclass
class VisualFrame:
    """One camera image: intrinsics plus 2D feature observations."""

    frame_index: int
    camera_id: int
    timestamp: float
    fu: float
    fv: float
    cu: float
    cv: float
    observations: dict = field(default_factory=dict)  # feature_id -> (2,) pixel
    pose: Pose | None = None                          # world-to-camera, once registered
    width: int | None = None
    height: int | None = None

    def observe(self, feature_id: int, uv) -> None:
        if feature_id in self.observations:
            raise ValueError(f"duplicate feature id {feature_id}")
        self.observations[feature_id] = np.asarray(uv, dtype=float).reshape(2)

    def bearing(self, feature_id: int) -> np.ndarray:
        """Unit ray through the observation, in camera coordinates."""
        u, v = self.observations[feature_id]
        m = np.array([(u - self.cu) / self.fu, (v - self.cv) / self.fv, 1.0])
        return m / np.linalg.norm(m)

    def in_view(self, uv) -> bool:
        if self.width is None or self.height is None:
            return True
        return 0 <= uv[0] < self.width and 0 <= uv[1] < self.height

    def camera_center(self) -> np.ndarray:
        return -self.pose.rotation.T @ self.pose.translation


@dataclass
class MapPoint:
    """Triangulated 3D feature with its observation track."""

    position: np.ndarray
    track: list  # [(frame_index, feature_id), ...]

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if len(self.track) < 2:
            raise ValueError("a map point needs a track of length >= 2")


@dataclass
class Extrinsics:
    """Camera-to-LiDAR rigid transform per camera id."""

    lidar_from_camera: dict

    def lidar_pose_from_camera(self, camera_pose: Pose, camera_id: int) -> Pose:
        """World pose of the LiDAR body implied by a registered camera."""
        world_from_camera = camera_pose.inverse()
        return world_from_camera.compose(self.lidar_from_camera[camera_id].inverse())

    def camera_pose_from_lidar(self, lidar_pose: Pose, camera_id: int) -> Pose:
        """World-to-camera pose implied by a LiDAR body pose."""
        world_from_camera = lidar_pose.compose(self.lidar_from_camera[camera_id])
        return world_from_camera.inverse()


def reprojection_residual(mp: MapPoint, frame: VisualFrame, feature_id: int) -> np.ndarray:
    """Projected-minus-observed pixel residual for one track element."""
    obs = frame.observations[feature_id]
    px = project_pinhole(frame.fu, frame.fv, frame.cu, frame.cv,
                         frame.pose, mp.position)
    return px - obs


def triangulate(views) -> tuple[np.ndarray, float]:
    """Linear (DLT) triangulation over >= 2 posed views, polished by a few
    Gauss-Newton steps on the reprojection error.

    ``views`` is a sequence of (VisualFrame, pixel) pairs; returns the
    point and the RMS reprojection error in pixels.
    """
    views = list(views)
    if len(views) < 2:
        raise DegenerateBaseline("need at least two views")
    centers = np.array([f.camera_center() for f, _ in views])
    spread = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    if spread < 1e-9:
        raise DegenerateBaseline("camera centers coincide")
    rows = []
    for f, uv in views:
        uv = np.asarray(uv, dtype=float)
        K = np.array([[f.fu, 0, f.cu], [0, f.fv, f.cv], [0, 0, 1.0]])
        P = K @ np.hstack([f.pose.rotation, f.pose.translation[:, None]])
        rows.append(uv[0] * P[2] - P[0])
        rows.append(uv[1] * P[2] - P[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-12:
        raise DegenerateBaseline("point at infinity")
    x = X[:3] / X[3]
    x = _refine_point(x, views)
    rms = _reprojection_rms(x, views)
    return x, rms


def _refine_point(x, views, iterations=5):
    for _ in range(iterations):
        H = np.zeros((3, 3))
        g = np.zeros(3)
        for f, uv in views:
            y = f.pose.apply(x)
            if y[2] <= 1e-9:
                return x
            J_pi = np.array([[f.fu / y[2], 0.0, -f.fu * y[0] / y[2] ** 2],
                             [0.0, f.fv / y[2], -f.fv * y[1] / y[2] ** 2]])
            r = np.array([f.fu * y[0] / y[2] + f.cu,
                          f.fv * y[1] / y[2] + f.cv]) - uv
            J = J_pi @ f.pose.rotation
            H += J.T @ J
            g += J.T @ r
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(3), -g)
        except np.linalg.LinAlgError:
            return x
        x = x + step
        if np.linalg.norm(step) < 1e-12:
            break
    return x


def _reprojection_rms(x, views):
    errs = []
    for f, uv in views:
        y = f.pose.apply(x)
        if y[2] <= 1e-9:
            errs.append(np.inf)
            continue
        px = np.array([f.fu * y[0] / y[2] + f.cu, f.fv * y[1] / y[2] + f.cv])
        errs.append(np.sum((px - uv) ** 2))
    return float(np.sqrt(np.mean(errs)))


def _p3p_solve(world, bearings):
    """Three-point pose candidates (world-to-camera).

    Solves the classic distance system along the three bearing rays. The
    quartic in the depth ratio is formed numerically as the resultant of
    the two quadratic constraints, avoiding hand-derived coefficients.
    """
    P1, P2, P3 = world
    f1, f2, f3 = bearings
    a = np.linalg.norm(P2 - P3)
    b = np.linalg.norm(P1 - P3)
    c = np.linalg.norm(P1 - P2)
    if min(a, b, c) < 1e-12:
        return []
    q1 = 2.0 * float(f2 @ f3)
    q2 = 2.0 * float(f1 @ f3)
    q3 = 2.0 * float(f1 @ f2)
    a2, b2, c2 = a * a, b * b, c * c
    # Quadratics in u with coefficients polynomial in v (ascending order):
    #   P: b2*u^2 + p1(v)*u + p0(v),  Q: b2*u^2 + r1*u + r0(v)
    p0 = np.array([-a2, a2 * q2, b2 - a2])
    p1 = np.array([0.0, -b2 * q1])
    r0 = np.array([b2 - c2, c2 * q2, -c2])
    r1 = np.array([-b2 * q3])
    mul = np.polynomial.polynomial.polymul
    sub = np.polynomial.polynomial.polysub
    A_poly = b2 * sub(r0, p0)
    B_poly = b2 * sub(r1, p1)
    C_poly = sub(mul(p1, r0), mul(p0, r1))
    quartic = sub(mul(A_poly, A_poly), mul(B_poly, C_poly))
    roots = np.polynomial.polynomial.polyroots(quartic)
    poses = []
    for v in roots:
        if abs(v.imag) > 1e-8 or v.real <= 0:
            continue
        v = float(v.real)
        denom = np.polynomial.polynomial.polyval(v, p1) - r1[0]
        if abs(denom) < 1e-12:
            continue
        u = float((np.polynomial.polynomial.polyval(v, r0)
                   - np.polynomial.polynomial.polyval(v, p0)) / denom)
        if u <= 0:
            continue
        s1_sq = b2 / (1.0 + v * v - q2 * v)
        if s1_sq <= 0:
            continue
        s1 = np.sqrt(s1_sq)
        cam = np.array([s1 * f1, u * s1 * f2, v * s1 * f3])
        try:
            sim = umeyama_align(world, cam, with_scale=False)
        except DegenerateInput:
            continue
        poses.append(Pose(sim.rotation, sim.translation))
    return poses


@dataclass
class PnpResult:
    pose: Pose
    inlier_ids: list
    rms: float


def pnp_register(frame: VisualFrame, map_points: dict,
                 inlier_px: float = 4.0, max_iterations: int = 200,
                 min_inlier_ratio: float = 0.3, seed: int = 0) -> PnpResult:
    """Robust camera pose from 2D-3D correspondences.

    RANSAC over three-point minimal samples, scored by reprojection
    inliers, followed by Gauss-Newton refinement on the inlier set.
    """
    ids = sorted(fid for fid in frame.observations if fid in map_points)
    if len(ids) < 4:
        raise TooFewCorrespondences(f"{len(ids)} < 4 correspondences")
    world = np.array([map_points[fid].position for fid in ids])
    pixels = np.array([frame.observations[fid] for fid in ids])
    bearings = np.array([_pixel_bearing(frame, px) for px in pixels])
    rng = np.random.default_rng(seed)
    n = len(ids)
    best_pose = None
    best_inliers = np.zeros(n, dtype=bool)

    def reproj_errors(pose):
        y = pose.apply(world)
        ok = y[:, 2] > 1e-9
        z = np.where(ok, y[:, 2], 1.0)
        px = np.column_stack([frame.fu * y[:, 0] / z + frame.cu,
                              frame.fv * y[:, 1] / z + frame.cv])
        err = np.linalg.norm(px - pixels, axis=1)
        return np.where(ok, err, np.inf)

    for _ in range(max_iterations):
        sample = rng.choice(n, size=3, replace=False)
        for pose in _p3p_solve(world[sample], bearings[sample]):
            inliers = reproj_errors(pose) < inlier_px
            if inliers.sum() > best_inliers.sum():
                best_inliers = inliers
                best_pose = pose
        if best_inliers.sum() == n:
            break
    if best_pose is None or best_inliers.sum() < max(4, int(np.ceil(min_inlier_ratio * n))):
        raise ConsensusFailed(
            f"best consensus {int(best_inliers.sum())}/{n} too small")
    pose = _refine_pnp(best_pose, world[best_inliers], pixels[best_inliers], frame)
    inliers = reproj_errors(pose) < inlier_px
    if inliers.sum() >= 4:
        pose = _refine_pnp(pose, world[inliers], pixels[inliers], frame)
    else:
        inliers = best_inliers
    errs = reproj_errors(pose)[inliers]
    rms = float(np.sqrt(np.mean(errs ** 2))) if inliers.any() else np.inf
    inlier_ids = [ids[i] for i in np.nonzero(inliers)[0]]
    return PnpResult(pose.with_timestamp(frame.timestamp), inlier_ids, rms)


def _pixel_bearing(frame, uv):
    m = np.array([(uv[0] - frame.cu) / frame.fu,
                  (uv[1] - frame.cv) / frame.fv, 1.0])
    return m / np.linalg.norm(m)


def _refine_pnp(pose, world, pixels, frame, iterations=10):
    for _ in range(iterations):
        y = pose.apply(world)
        ok = y[:, 2] > 1e-9
        if ok.sum() < 4:
            return pose
        yv = y[ok]
        z = yv[:, 2]
        px = np.column_stack([frame.fu * yv[:, 0] / z + frame.cu,
                              frame.fv * yv[:, 1] / z + frame.cv])
        r = (px - pixels[ok]).reshape(-1)
        J = np.zeros((ok.sum(), 2, 6))
        J_pi = np.zeros((ok.sum(), 2, 3))
        J_pi[:, 0, 0] = frame.fu / z
        J_pi[:, 0, 2] = -frame.fu * yv[:, 0] / z ** 2
        J_pi[:, 1, 1] = frame.fv / z
        J_pi[:, 1, 2] = -frame.fv * yv[:, 1] / z ** 2
        # Left perturbation: dy = -[y]x dw + dv.
        hat = np.zeros((ok.sum(), 3, 3))
        hat[:, 0, 1] = -yv[:, 2]
        hat[:, 0, 2] = yv[:, 1]
        hat[:, 1, 0] = yv[:, 2]
        hat[:, 1, 2] = -yv[:, 0]
        hat[:, 2, 0] = -yv[:, 1]
        hat[:, 2, 1] = yv[:, 0]
        J[:, :, :3] = np.einsum("nij,njk->nik", J_pi, -hat)
        J[:, :, 3:] = J_pi
        Jf = J.reshape(-1, 6)
        H = Jf.T @ Jf
        g = Jf.T @ r
        try:
            step = np.linalg.solve(H + 1e-9 * np.eye(6), -g)
        except np.linalg.LinAlgError:
            return pose
        pose = se3_exp(step).compose(pose)
        if np.linalg.norm(step) < 1e-14:
            break
    return pose


@dataclass
class TwoViewResult:
    pose_a: Pose
    pose_b: Pose                  # world-to-camera, |translation| = 1
    points: dict                  # feature_id -> MapPoint
    inlier_ids: list


def two_view_init(frame_a: VisualFrame, frame_b: VisualFrame,
                  matches=None, min_parallax_deg: float = 0.5) -> TwoViewResult:
    """Relative pose and seed structure from two views of shared features.

    Eight-point essential-matrix estimate on normalized coordinates,
    candidate decomposition disambiguated by cheirality, then structure
    from triangulation. The translation is normalized to unit length (the
    visual map is up to scale until the LiDAR alignment fixes it).
    """
    if matches is None:
        matches = sorted(set(frame_a.observations) & set(frame_b.observations))
    matches = list(matches)
    if len(matches) < 8:
        raise DegenerateGeometry(f"{len(matches)} < 8 matches")
    xa = np.array([_pixel_bearing_h(frame_a, frame_a.observations[fid])
                   for fid in matches])
    xb = np.array([_pixel_bearing_h(frame_b, frame_b.observations[fid])
                   for fid in matches])
    A = np.column_stack([
        xb[:, 0] * xa[:, 0], xb[:, 0] * xa[:, 1], xb[:, 0] * xa[:, 2],
        xb[:, 1] * xa[:, 0], xb[:, 1] * xa[:, 1], xb[:, 1] * xa[:, 2],
        xb[:, 2] * xa[:, 0], xb[:, 2] * xa[:, 1], xb[:, 2] * xa[:, 2]])
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    U, S, Vt2 = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt2) < 0:
        Vt2 = -Vt2
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    candidates = []
    for R in (U @ W @ Vt2, U @ W.T @ Vt2):
        for t in (U[:, 2], -U[:, 2]):
            candidates.append(Pose(R, t))
    pose_a = Pose.identity(frame_a.timestamp)
    best = None
    for pose_b in candidates:
        votes, pts = _cheirality(frame_a, frame_b, pose_a, pose_b, matches, xa, xb)
        if best is None or votes > best[0]:
            best = (votes, pose_b, pts)
    votes, pose_b, pts = best
    if votes < max(5, int(0.6 * len(matches))):
        raise DegenerateGeometry("no candidate passes the cheirality test")
    parallax = _median_parallax_deg(pts, pose_a, pose_b)
    if parallax < min_parallax_deg:
        raise DegenerateGeometry(f"median parallax {parallax:.3f} deg too small")
    points = {}
    inlier_ids = []
    for fid, x in pts:
        points[fid] = MapPoint(x, [(frame_a.frame_index, fid),
                                   (frame_b.frame_index, fid)])
        inlier_ids.append(fid)
    return TwoViewResult(pose_a, pose_b.with_timestamp(frame_b.timestamp),
                         points, inlier_ids)


def _pixel_bearing_h(frame, uv):
    return np.array([(uv[0] - frame.cu) / frame.fu,
                     (uv[1] - frame.cv) / frame.fv, 1.0])


def _cheirality(frame_a, frame_b, pose_a, pose_b, matches, xa, xb):
    votes = 0
    pts = []
    fa = VisualFrame(frame_a.frame_index, frame_a.camera_id, frame_a.timestamp,
                     1.0, 1.0, 0.0, 0.0)
    fb = VisualFrame(frame_b.frame_index, frame_b.camera_id, frame_b.timestamp,
                     1.0, 1.0, 0.0, 0.0)
    fa.pose = pose_a
    fb.pose = pose_b
    for i, fid in enumerate(matches):
        try:
            x, _ = triangulate([(fa, xa[i, :2]), (fb, xb[i, :2])])
        except DegenerateBaseline:
            continue
        za = pose_a.apply(x)[2]
        zb = pose_b.apply(x)[2]
        if za > 0 and zb > 0:
            votes += 1
            pts.append((fid, x))
    return votes, pts


def _median_parallax_deg(pts, pose_a, pose_b):
    if not pts:
        return 0.0
    ca = -pose_a.rotation.T @ pose_a.translation
    cb = -pose_b.rotation.T @ pose_b.translation
    angles = []
    for _, x in pts:
        va = x - ca
        vb = x - cb
        denom = np.linalg.norm(va) * np.linalg.norm(vb)
        if denom < 1e-12:
            continue
        cosang = np.clip(va @ vb / denom, -1.0, 1.0)
        angles.append(np.degrees(np.arccos(cosang)))
    return float(np.median(angles)) if angles else 0.0


@dataclass
class IcpResult:
    pose: Pose            # maps frame_b local points into frame_a coordinates
    rms: float
    iterations: int


def init_lidar_pair_icp(frame_a, frame_b, init: Pose,
                        gate: float = 1.0, max_iterations: int = 30,
                        max_points: int = 3000, min_pairs: int = 10) -> IcpResult:
    """Point-to-point ICP between two scans with a nearest-neighbor gate."""
    target = frame_a.points
    source = frame_b.points
    if len(source) > max_points:
        source = source[:: int(np.ceil(len(source) / max_points))]
    tree = cKDTree(target)
    pose = init
    rms = np.inf
    it = 0
    for it in range(1, max_iterations + 1):
        moved = pose.apply(source)
        dist, idx = tree.query(moved, distance_upper_bound=gate)
        valid = np.isfinite(dist)
        if valid.sum() < min_pairs:
            raise IcpDiverged(f"only {int(valid.sum())} pairs within {gate} m gate")
        src = source[valid]
        dst = target[idx[valid]]
        try:
            sim = umeyama_align(src, dst, with_scale=False)
        except DegenerateInput as exc:
            raise IcpDiverged(f"degenerate correspondence set: {exc}") from exc
        new_pose = Pose(sim.rotation, sim.translation)
        delta = np.linalg.norm(new_pose.translation - pose.translation) + \
            np.linalg.norm(new_pose.rotation - pose.rotation)
        pose = new_pose
        rms = float(np.sqrt(np.mean(np.sum((pose.apply(src) - dst) ** 2, axis=1))))
        if delta < 1e-12:
            break
    return IcpResult(pose, rms, it)


def align_lidar_to_visual(lidar_poses, camera_poses, camera_ids,
                          extrinsics: Extrinsics) -> Similarity:
    """Similarity mapping LiDAR-frame positions onto the positions implied
    by time-matched camera poses (the up-to-scale visual frame).

    With three or more well-spread pose pairs this is a plain point-set
    similarity fit. Two pose pairs (the initialization case) leave the
    rotation about the connecting axis free, so the relative orientations
    of the poses disambiguate it: scale from the position spread, rotation
    as the chordal mean of the per-frame rotation offsets.
    """
    lidar_poses = list(lidar_poses)
    camera_poses = list(camera_poses)
    camera_ids = list(camera_ids)
    if not (len(lidar_poses) == len(camera_poses) == len(camera_ids)):
        raise DegenerateInput("pose list length mismatch")
    if len(lidar_poses) < 2:
        raise DegenerateInput("need at least two pose pairs")
    implied = [extrinsics.lidar_pose_from_camera(cp, cid)
               for cp, cid in zip(camera_poses, camera_ids)]
    src = np.array([p.translation for p in lidar_poses])
    dst = np.array([p.translation for p in implied])
    try:
        return umeyama_align(src, dst, with_scale=True)
    except DegenerateInput:
        pass
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    var_s = float(np.sum((src - mu_s) ** 2))
    var_d = float(np.sum((dst - mu_d) ** 2))
    if var_s < 1e-18 or var_d < 1e-18:
        raise DegenerateInput("pose positions coincide")
    scale = np.sqrt(var_d / var_s)
    M = np.zeros((3, 3))
    for lp, ip in zip(lidar_poses, implied):
        M += ip.rotation @ lp.rotation.T
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    t = mu_d - scale * (R @ mu_s)
    return Similarity(scale, R, t)
