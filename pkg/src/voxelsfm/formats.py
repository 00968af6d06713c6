"""File formats: KITTI velodyne binaries, KITTI/TUM trajectories, feature
track files, and camera metadata."""

from __future__ import annotations

import os

import numpy as np

from .errors import MalformedFile, ParseError
from .geom import Pose, _quat_from_rotation, _rotation_from_quat
from .registration import LidarFrame


def read_kitti_bin(path, frame_index: int = 0, timestamp: float = 0.0) -> LidarFrame:
    """Little-endian float32 (x, y, z, reflectance) quadruples; reflectance
    in [0, 1] is rescaled to [0, 255] intensity."""
    size = os.path.getsize(path)
    if size % 16 != 0:
        raise MalformedFile(f"{path}: size {size} not divisible by 16")
    data = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    points = data[:, :3].astype(float)
    intensities = np.clip(data[:, 3].astype(float), 0.0, 1.0) * 255.0
    return LidarFrame(frame_index, timestamp, points, intensities)


def write_kitti_bin(path, frame: LidarFrame) -> None:
    data = np.empty((len(frame), 4), dtype="<f4")
    data[:, :3] = frame.points
    data[:, 3] = frame.intensities / 255.0
    data.tofile(path)


def read_trajectory(path, fmt: str = "tum"):
    """KITTI: 12 floats per line, row-major [R|t]. TUM: `t tx ty tz qx qy
    qz qw`. Returns a list of Poses (timestamps only for TUM)."""
    poses = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                vals = [float(x) for x in parts]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
            if fmt == "kitti":
                if len(vals) != 12:
                    raise ParseError(f"expected 12 values, got {len(vals)}", lineno)
                M = np.array(vals).reshape(3, 4)
                poses.append(Pose(_orthonormalize(M[:, :3]), M[:, 3]))
            elif fmt == "tum":
                if len(vals) != 8:
                    raise ParseError(f"expected 8 values, got {len(vals)}", lineno)
                t, tx, ty, tz, qx, qy, qz, qw = vals
                poses.append(Pose(_rotation_from_quat([qx, qy, qz, qw]),
                                  [tx, ty, tz], timestamp=t))
            else:
                raise ValueError(f"unknown trajectory format {fmt!r}")
    return poses


def write_trajectory(path, poses, fmt: str = "tum") -> None:
    with open(path, "w", encoding="ascii") as f:
        for i, p in enumerate(poses):
            if fmt == "kitti":
                M = np.hstack([p.rotation, p.translation[:, None]])
                f.write(" ".join("%.12g" % v for v in M.reshape(-1)) + "\n")
            elif fmt == "tum":
                q = _quat_from_rotation(p.rotation)
                t = p.timestamp if p.timestamp is not None else float(i)
                f.write("%.9f %.12g %.12g %.12g %.12g %.12g %.12g %.12g\n"
                        % (t, p.translation[0], p.translation[1],
                           p.translation[2], q[0], q[1], q[2], q[3]))
            else:
                raise ValueError(f"unknown trajectory format {fmt!r}")


def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    return U @ D @ Vt


def read_tracks(path):
    """Track rows `frame_index camera_id feature_id u v`, one per line."""
    rows = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ParseError(f"expected 5 fields, got {len(parts)}", lineno)
            try:
                rows.append((int(parts[0]), int(parts[1]), int(parts[2]),
                             float(parts[3]), float(parts[4])))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
    return rows


def write_tracks(path, rows) -> None:
    with open(path, "w", encoding="ascii") as f:
        for frame_index, camera_id, feature_id, u, v in rows:
            f.write("%d %d %d %.9g %.9g\n"
                    % (frame_index, camera_id, feature_id, u, v))


def read_cameras(path):
    """Camera metadata rows:
    `frame_index camera_id timestamp fu fv cu cv width height`."""
    rows = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise ParseError(f"expected 9 fields, got {len(parts)}", lineno)
            try:
                rows.append((int(parts[0]), int(parts[1]), float(parts[2]),
                             float(parts[3]), float(parts[4]), float(parts[5]),
                             float(parts[6]), int(parts[7]), int(parts[8])))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
    return rows


def write_cameras(path, rows) -> None:
    with open(path, "w", encoding="ascii") as f:
        for row in rows:
            f.write("%d %d %.9f %.9g %.9g %.9g %.9g %d %d\n" % tuple(row))


def read_timestamps(path):
    times = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                times.append(float(line))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
    return times


def write_timestamps(path, times) -> None:
    with open(path, "w", encoding="ascii") as f:
        for t in times:
            f.write("%.9f\n" % t)
