"""Dense cloud assembly: transform every LiDAR point by its optimized
pose, colorize through the time-closest camera frame, and emit PLY."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Pose


@dataclass
class FusedCloud:
    points: np.ndarray        # (N, 3) world coordinates
    colors: np.ndarray        # (N, 3) uint8
    intensities: np.ndarray   # (N,)
    frame_indices: np.ndarray  # (N,) source LiDAR frame

    def __len__(self):
        return len(self.points)


class ImageSampler:
    """Bilinear color lookup in an (H, W, 3) image array."""

    def __init__(self, image):
        self.image = np.asarray(image, dtype=float)

    def sample(self, u, v):
        h, w = self.image.shape[:2]
        if not (0 <= u < w and 0 <= v < h):
            return None
        x0 = int(np.floor(u))
        y0 = int(np.floor(v))
        x1 = min(x0 + 1, w - 1)
        y1 = min(y0 + 1, h - 1)
        fx = u - x0
        fy = v - y0
        c = (self.image[y0, x0] * (1 - fx) * (1 - fy)
             + self.image[y0, x1] * fx * (1 - fy)
             + self.image[y1, x0] * (1 - fx) * fy
             + self.image[y1, x1] * fx * fy)
        return tuple(int(round(x)) for x in np.clip(c, 0, 255))


@dataclass
class FusionReport:
    fused_frames: int = 0
    skipped_frames: list = field(default_factory=list)  # (frame_index, reason)
    colored_points: int = 0
    gray_points: int = 0


def _gray(intensity):
    g = int(round(float(intensity)))
    g = min(max(g, 0), 255)
    return (g, g, g)


def colorize_and_fuse(scans, cameras, samplers=None,
                      depth_floor: float = 1e-6) -> tuple[FusedCloud, FusionReport]:
    """Fuse posed scans into one colorized cloud.

    ``scans`` is a sequence of (LidarFrame, Pose-or-None); frames without a
    pose are skipped and reported. ``cameras`` are posed VisualFrames;
    ``samplers`` maps camera frame_index to a color sampler (bilinear image
    or synthetic field). Points out of view, behind the camera, or without
    a sampler fall back to intensity-derived gray. Time-closest ties break
    toward the earlier camera frame.
    """
    samplers = samplers or {}
    report = FusionReport()
    cams = [f for f in cameras if f.pose is not None]
    cams.sort(key=lambda f: (f.timestamp, f.frame_index))
    out_pts = []
    out_col = []
    out_int = []
    out_idx = []
    for frame, pose in sorted(scans, key=lambda fp: fp[0].frame_index):
        if pose is None:
            report.skipped_frames.append((frame.frame_index, "missing pose"))
            continue
        x_w = pose.apply(frame.points)
        colors = np.zeros((len(x_w), 3), dtype=np.uint8)
        gray = np.array([_gray(u) for u in frame.intensities], dtype=np.uint8)
        colors[:] = gray
        cam = _time_closest(cams, frame.timestamp)
        if cam is not None:
            sampler = samplers.get(cam.frame_index)
            if sampler is not None:
                y = cam.pose.apply(x_w)
                ok = y[:, 2] > depth_floor
                z = np.where(ok, y[:, 2], 1.0)
                u = cam.fu * y[:, 0] / z + cam.cu
                v = cam.fv * y[:, 1] / z + cam.cv
                for i in np.nonzero(ok)[0]:
                    if not cam.in_view((u[i], v[i])):
                        continue
                    c = sampler.sample(u[i], v[i])
                    if c is not None:
                        colors[i] = c
                        report.colored_points += 1
        out_pts.append(x_w)
        out_col.append(colors)
        out_int.append(frame.intensities)
        out_idx.append(np.full(len(x_w), frame.frame_index, dtype=np.int64))
        report.fused_frames += 1
    if out_pts:
        cloud = FusedCloud(np.vstack(out_pts), np.vstack(out_col),
                           np.concatenate(out_int), np.concatenate(out_idx))
    else:
        cloud = FusedCloud(np.zeros((0, 3)), np.zeros((0, 3), np.uint8),
                           np.zeros(0), np.zeros(0, np.int64))
    report.gray_points = len(cloud) - report.colored_points
    return cloud, report


def _time_closest(cams, timestamp):
    best = None
    best_key = None
    for f in cams:
        key = (abs(f.timestamp - timestamp), f.timestamp)
        if best_key is None or key < best_key:
            best_key = key
            best = f
    return best


def grid_downsample(cloud: FusedCloud, cell: float) -> FusedCloud:
    """Keep the first point per cubic cell (output size control)."""
    if len(cloud) == 0 or cell <= 0:
        return cloud
    keys = np.floor(cloud.points / cell).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return FusedCloud(cloud.points[first], cloud.colors[first],
                      cloud.intensities[first], cloud.frame_indices[first])


def write_ply(cloud: FusedCloud, path, ascii_format: bool = False) -> None:
    """Binary little-endian PLY (float32 xyz, uint8 rgb, float32 intensity),
    or the ASCII variant."""
    n = len(cloud)
    header = [
        "ply",
        "format ascii 1.0" if ascii_format else "format binary_little_endian 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property float intensity",
        "end_header",
    ]
    if ascii_format:
        with open(path, "w", encoding="ascii") as f:
            f.write("\n".join(header) + "\n")
            for i in range(n):
                p = cloud.points[i]
                c = cloud.colors[i]
                f.write("%.7g %.7g %.7g %d %d %d %.7g\n"
                        % (p[0], p[1], p[2], c[0], c[1], c[2],
                           cloud.intensities[i]))
        return
    rec = np.zeros(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                             ("red", "u1"), ("green", "u1"), ("blue", "u1"),
                             ("intensity", "<f4")])
    rec["x"] = cloud.points[:, 0]
    rec["y"] = cloud.points[:, 1]
    rec["z"] = cloud.points[:, 2]
    rec["red"] = cloud.colors[:, 0]
    rec["green"] = cloud.colors[:, 1]
    rec["blue"] = cloud.colors[:, 2]
    rec["intensity"] = cloud.intensities
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        rec.tofile(f)


def read_ply(path) -> FusedCloud:
    """Read clouds written by :func:`write_ply` (both variants)."""
    with open(path, "rb") as f:
        header = []
        while True:
            line = f.readline().decode("ascii").strip()
            header.append(line)
            if line == "end_header":
                break
        n = int(next(h.split()[-1] for h in header if h.startswith("element vertex")))
        binary = any("binary_little_endian" in h for h in header)
        dtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                 ("red", "u1"), ("green", "u1"), ("blue", "u1"),
                 ("intensity", "<f4")]
        if binary:
            rec = np.fromfile(f, dtype=dtype, count=n)
        else:
            rows = [f.readline().decode("ascii").split() for _ in range(n)]
            rec = np.zeros(n, dtype=dtype)
            for i, row in enumerate(rows):
                rec[i] = (float(row[0]), float(row[1]), float(row[2]),
                          int(row[3]), int(row[4]), int(row[5]), float(row[6]))
    points = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(float)
    colors = np.column_stack([rec["red"], rec["green"], rec["blue"]])
    return FusedCloud(points, colors.astype(np.uint8),
                      rec["intensity"].astype(float),
                      np.zeros(n, dtype=np.int64))
