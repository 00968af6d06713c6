"""Shared synthetic fixtures: a three-orthogonal-plane room, disjoint plane
patches, and scans of them."""

import numpy as np

from voxelsfm.geom import Pose, so3_exp
from voxelsfm.registration import LidarFrame
from voxelsfm.voxelmap import VoxelMap, VoxelMapConfig

ROOM_EXTENT = 3.6
# Keeps the surfaces away from the 3m voxel-grid boundaries.
ROOM_OFFSET = np.array([0.3, 0.3, 0.3])


def sample_room_points(n, rng, extent=ROOM_EXTENT, margin=0.2):
    """Points on the floor and the two walls of the offset room corner."""
    per = n // 3
    lo, hi = margin, extent - margin
    a = rng.uniform(lo, hi, size=(per, 2))
    floor = np.column_stack([a[:, 0], a[:, 1], np.zeros(per)])
    b = rng.uniform(lo, hi, size=(per, 2))
    wall_x = np.column_stack([np.zeros(per), b[:, 0], b[:, 1]])
    c = rng.uniform(lo, hi, size=(n - 2 * per, 2))
    wall_y = np.column_stack([c[:, 0], np.zeros(n - 2 * per), c[:, 1]])
    return np.vstack([floor, wall_x, wall_y]) + ROOM_OFFSET


def _range_noise(points_w, origin, sigma, rng):
    d = points_w - origin
    r = np.linalg.norm(d, axis=1, keepdims=True)
    r[r == 0] = 1.0
    return points_w + d / r * rng.normal(scale=sigma, size=(len(points_w), 1))


def make_room_map(n_points=6000, seed=0, noise=0.0, config=None,
                  extent=ROOM_EXTENT, frame_index=0):
    """Voxel map built from a dense sampling of the room surfaces."""
    rng = np.random.default_rng(seed)
    pts = sample_room_points(n_points, rng, extent)
    if noise > 0:
        origin = ROOM_OFFSET + extent / 2
        pts = _range_noise(pts, origin, noise, rng)
    vmap = VoxelMap(config or VoxelMapConfig())
    vmap.insert_frame(pts, 100.0, frame_index)
    return vmap


def sensor_pose(rng=None, extent=ROOM_EXTENT):
    """A sensor pose inside the room, mildly rotated."""
    rng = rng or np.random.default_rng(0)
    t = ROOM_OFFSET + np.array([extent * 0.5, extent * 0.5, extent * 0.35])
    t = t + rng.uniform(-0.3, 0.3, size=3)
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0, np.radians(10))
    return Pose(so3_exp(w), t)


def make_scan(gt_pose, n_points=1500, seed=1, noise=0.01, extent=ROOM_EXTENT,
              frame_index=0, timestamp=0.0, intensity=100.0):
    """Scan of the room surfaces expressed in the sensor frame.

    Range noise perturbs each hit along the sensor-to-point ray.
    """
    rng = np.random.default_rng(seed)
    pts_w = sample_room_points(n_points, rng, extent)
    if noise > 0:
        pts_w = _range_noise(pts_w, gt_pose.translation, noise, rng)
    pts_l = gt_pose.inverse().apply(pts_w)
    return LidarFrame(frame_index, timestamp, pts_l,
                      np.full(len(pts_l), float(intensity)))


# Three disjoint, mutually orthogonal 3x3m plane patches. Every occupied
# voxel sees exactly one exact plane, so the registration cost is exactly
# equivariant under rigid transforms of map plus init.
_PATCHES = [
    # (origin, in-plane axis u, in-plane axis v)
    (np.array([9.4, 9.4, 0.4]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0])),
    (np.array([0.4, 20.4, 4.4]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])),
    (np.array([30.4, 0.4, 10.4]), np.array([1.0, 0, 0]), np.array([0, 0, 1.0])),
]
_PATCH_SIZE = 3.0


def sample_patch_points(n, rng, margin=0.0):
    per = n // len(_PATCHES)
    pts = []
    for k, (origin, u, v) in enumerate(_PATCHES):
        m = per if k < len(_PATCHES) - 1 else n - per * (len(_PATCHES) - 1)
        a = rng.uniform(margin, _PATCH_SIZE - margin, size=(m, 1))
        b = rng.uniform(margin, _PATCH_SIZE - margin, size=(m, 1))
        pts.append(origin + a * u + b * v)
    return np.vstack(pts)


def make_patches_map(n_points=9000, seed=0, config=None, frame_index=0):
    rng = np.random.default_rng(seed)
    vmap = VoxelMap(config or VoxelMapConfig())
    vmap.insert_frame(sample_patch_points(n_points, rng), 100.0, frame_index)
    return vmap


def make_patch_scan(gt_pose, n_points=900, seed=1, frame_index=0,
                    timestamp=0.0, intensity=100.0, margin=0.4):
    rng = np.random.default_rng(seed)
    pts_w = sample_patch_points(n_points, rng, margin=margin)
    pts_l = gt_pose.inverse().apply(pts_w)
    return LidarFrame(frame_index, timestamp, pts_l,
                      np.full(len(pts_l), float(intensity)))


def random_perturbation(rng, max_trans=0.3, max_angle_deg=5.0):
    """Random small pose offset with the given magnitude bounds."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    w = axis * np.radians(rng.uniform(0, max_angle_deg))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0, max_trans)
    return Pose(so3_exp(w), t)


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera pose with the optical axis towards the target."""
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    if abs(z @ up) > 0.95:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.column_stack([x, y, z]).T
    return Pose(R, -R @ center)


def make_ba_scene(n_cameras=20, n_lidar=20, n_landmarks=150, seed=0,
                  scan_points=800, scan_noise=0.01, min_points_for_fit=20):
    """A posed synthetic room scene for bundle-adjustment tests.

    Cameras look into the room corner from an arc; landmarks sit on the
    room surfaces; the voxel map is built from the ground-truth LiDAR
    scans with absorbed masks retained. Plane fits wait for a few more
    points than the default so the frozen Gaussians average the range
    noise down.
    """
    from voxelsfm.bundle import LidarBlock
    from voxelsfm.visual import MapPoint, VisualFrame

    rng = np.random.default_rng(seed)
    landmarks = sample_room_points(n_landmarks, rng, margin=0.4)
    corner = ROOM_OFFSET + 0.5

    cameras = {}
    map_points = {}
    fu = fv = 600.0
    cu = cv = 300.0
    for i in range(n_cameras):
        ang = 2.0 * np.pi * i / max(n_cameras, 1)
        center = ROOM_OFFSET + np.array([1.8 + 0.7 * np.cos(ang),
                                         1.8 + 0.7 * np.sin(ang),
                                         1.2 + 0.2 * np.sin(2 * ang)])
        pose = look_at(center, corner)
        frame = VisualFrame(i, 1, 0.1 * i, fu, fv, cu, cv)
        frame.pose = pose
        cameras[i] = frame

    for fid, x in enumerate(landmarks):
        track = []
        for i, frame in cameras.items():
            y = frame.pose.apply(x)
            if y[2] < 0.2:
                continue
            px = np.array([fu * y[0] / y[2] + cu, fv * y[1] / y[2] + cv])
            if np.abs(px - 300.0).max() > 1500.0:
                continue
            frame.observe(fid, px)
            track.append((i, fid))
        if len(track) >= 2:
            map_points[fid] = MapPoint(x.copy(), track)
        else:
            for i, _ in track:
                del cameras[i].observations[fid]

    vmap = VoxelMap(VoxelMapConfig(min_points_for_fit=min_points_for_fit))
    blocks = []
    gt_lidar = {}
    for j in range(n_lidar):
        ang = 2.0 * np.pi * j / max(n_lidar, 1)
        center = ROOM_OFFSET + np.array([1.8 + 0.9 * np.cos(ang),
                                         1.8 + 0.9 * np.sin(ang),
                                         1.0])
        pose = Pose(so3_exp([0.0, 0.0, ang * 0.1]), center, timestamp=0.1 * j)
        frame = make_scan(pose, n_points=scan_points, seed=1000 + j,
                          noise=scan_noise, frame_index=j, timestamp=0.1 * j)
        absorbed = vmap.insert_frame(pose.apply(frame.points),
                                     frame.intensities, j)
        blocks.append(LidarBlock(j, j, frame.points, frame.intensities, pose))
        gt_lidar[j] = (pose, absorbed, frame)
    return {
        "cameras": cameras,
        "map_points": map_points,
        "lidar_blocks": blocks,
        "vmap": vmap,
        "gt_lidar": gt_lidar,
        "landmarks": landmarks,
    }
