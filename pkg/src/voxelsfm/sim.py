"""Synthetic scenes: analytic surfaces, parametric trajectories, LiDAR
raycasting, landmark projection, and color fields.

Everything is deterministic given a seed, so generated scans double as
oracles for registration, bundle adjustment, and loop-closure tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoHits
from .geom import Pose, so3_exp
from .registration import LidarFrame
from .visual import VisualFrame

GRAY = (128, 128, 128)


@dataclass
class PlanePatch:
    """Bounded rectangle: origin plus two orthogonal in-plane extents."""

    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    size_u: float
    size_v: float
    color: tuple = GRAY
    intensity: float = 100.0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.u_axis = np.asarray(self.u_axis, dtype=float)
        self.u_axis = self.u_axis / np.linalg.norm(self.u_axis)
        self.v_axis = np.asarray(self.v_axis, dtype=float)
        self.v_axis = self.v_axis / np.linalg.norm(self.v_axis)
        self.normal = np.cross(self.u_axis, self.v_axis)

    def raycast(self, origins, dirs):
        denom = dirs @ self.normal
        safe = np.where(np.abs(denom) < 1e-12, 1.0, denom)
        t = ((self.origin - origins) @ self.normal) / safe
        p = origins + t[:, None] * dirs
        rel = p - self.origin
        a = rel @ self.u_axis
        b = rel @ self.v_axis
        ok = (np.abs(denom) >= 1e-12) & (t > 1e-6) \
            & (a >= 0) & (a <= self.size_u) & (b >= 0) & (b <= self.size_v)
        return np.where(ok, t, np.inf)

    def sample(self, n, rng):
        a = rng.uniform(0, self.size_u, size=(n, 1))
        b = rng.uniform(0, self.size_v, size=(n, 1))
        return self.origin + a * self.u_axis + b * self.v_axis

    def to_dict(self):
        return {"kind": "plane", "origin": self.origin.tolist(),
                "u_axis": self.u_axis.tolist(), "v_axis": self.v_axis.tolist(),
                "size_u": self.size_u, "size_v": self.size_v,
                "color": list(self.color), "intensity": self.intensity}


@dataclass
class Box:
    """Axis-aligned box; rays hitting from inside intersect the far wall."""

    lo: np.ndarray
    hi: np.ndarray
    color: tuple = GRAY
    intensity: float = 100.0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)

    def raycast(self, origins, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (self.lo - origins) * inv
            t2 = (self.hi - origins) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = tmax >= np.maximum(tmin, 0.0)
        t = np.where(tmin > 1e-6, tmin, tmax)  # outside: near face; inside: exit
        ok = hit & (t > 1e-6)
        return np.where(ok, t, np.inf)

    def sample(self, n, rng):
        # Surface samples, face-area weighted.
        ext = self.hi - self.lo
        areas = 2 * np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
        pts = np.empty((n, 3))
        faces = rng.choice(6, size=n, p=np.repeat(areas / areas.sum() / 2, 2))
        u = rng.uniform(size=(n, 3))
        pts = self.lo + u * ext
        for i, f in enumerate(faces):
            axis, side = divmod(f, 2)
            pts[i, axis] = self.hi[axis] if side else self.lo[axis]
        return pts

    def to_dict(self):
        return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "color": list(self.color), "intensity": self.intensity}


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: tuple = GRAY
    intensity: float = 100.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)

    def raycast(self, origins, dirs):
        oc = origins - self.center
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-6, t0, t1)
        return np.where(ok & (t > 1e-6), t, np.inf)

    def sample(self, n, rng):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d

    def to_dict(self):
        return {"kind": "sphere", "center": self.center.tolist(),
                "radius": self.radius, "color": list(self.color),
                "intensity": self.intensity}


def surface_from_dict(d):
    kind = d["kind"]
    if kind == "plane":
        return PlanePatch(d["origin"], d["u_axis"], d["v_axis"],
                          d["size_u"], d["size_v"], tuple(d["color"]),
                          d["intensity"])
    if kind == "box":
        return Box(d["lo"], d["hi"], tuple(d["color"]), d["intensity"])
    if kind == "sphere":
        return Sphere(d["center"], d["radius"], tuple(d["color"]), d["intensity"])
    raise ValueError(f"unknown surface kind {kind!r}")


@dataclass
class Trajectory:
    """Parametric pose path evaluated at arbitrary times.

    Kinds: ``circle`` (center, radius, angular_speed, z, yaw follows the
    tangent), ``line`` (start, velocity, fixed heading).
    """

    kind: str = "circle"
    center: tuple = (0.0, 0.0, 1.0)
    radius: float = 1.0
    angular_speed: float = 0.2       # rad/s
    start: tuple = (0.0, 0.0, 1.0)
    velocity: tuple = (1.0, 0.0, 0.0)
    phase: float = 0.0

    def pose_at(self, t: float) -> Pose:
        if self.kind == "circle":
            ang = self.phase + self.angular_speed * t
            c = np.asarray(self.center, dtype=float)
            p = c + self.radius * np.array([np.cos(ang), np.sin(ang), 0.0])
            yaw = ang + np.pi / 2.0  # heading along the tangent
            return Pose(so3_exp([0.0, 0.0, yaw]), p, timestamp=t)
        if self.kind == "line":
            p = np.asarray(self.start, dtype=float) \
                + t * np.asarray(self.velocity, dtype=float)
            v = np.asarray(self.velocity, dtype=float)
            yaw = np.arctan2(v[1], v[0]) if np.linalg.norm(v[:2]) > 0 else 0.0
            return Pose(so3_exp([0.0, 0.0, yaw]), p, timestamp=t)
        raise ValueError(f"unknown trajectory kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, "center": list(self.center),
                "radius": self.radius, "angular_speed": self.angular_speed,
                "start": list(self.start), "velocity": list(self.velocity),
                "phase": self.phase}


@dataclass
class SensorModel:
    rays_per_scan: int = 1200
    range_noise: float = 0.01
    max_range: float = 60.0

    def to_dict(self):
        return {"rays_per_scan": self.rays_per_scan,
                "range_noise": self.range_noise, "max_range": self.max_range}


@dataclass
class CameraModel:
    # 90 x 74 degree field of view: indoor scenes need wide coverage.
    fu: float = 320.0
    fv: float = 320.0
    cu: float = 320.0
    cv: float = 240.0
    width: int = 640
    height: int = 480
    rate_hz: float = 4.0
    pixel_noise: float = 0.0
    min_depth: float = 0.15

    def to_dict(self):
        return {"fu": self.fu, "fv": self.fv, "cu": self.cu, "cv": self.cv,
                "width": self.width, "height": self.height,
                "rate_hz": self.rate_hz, "pixel_noise": self.pixel_noise,
                "min_depth": self.min_depth}


@dataclass
class DriftSpec:
    """Per-step odometry noise and discrete jumps, for corrupting
    estimates in loop-closure fixtures."""

    odometry_rot_noise: float = 0.0   # rad per step
    odometry_trans_noise: float = 0.0  # m per step
    jumps: list = field(default_factory=list)  # (frame_index, twist 6-list)

    def to_dict(self):
        return {"odometry_rot_noise": self.odometry_rot_noise,
                "odometry_trans_noise": self.odometry_trans_noise,
                "jumps": [[int(i), list(map(float, tw))] for i, tw in self.jumps]}


@dataclass
class SceneSpec:
    surfaces: list = field(default_factory=list)
    trajectory: Trajectory = field(default_factory=Trajectory)
    sensor: SensorModel = field(default_factory=SensorModel)
    camera: CameraModel = field(default_factory=CameraModel)
    drift: DriftSpec = field(default_factory=DriftSpec)
    n_frames: int = 40
    lidar_rate_hz: float = 10.0
    n_landmarks: int = 1200
    seed: int = 0

    def lidar_timestamps(self):
        return [i / self.lidar_rate_hz for i in range(self.n_frames)]

    def camera_timestamps(self):
        t_end = (self.n_frames - 1) / self.lidar_rate_hz
        n = int(np.floor(t_end * self.camera.rate_hz)) + 1
        return [i / self.camera.rate_hz for i in range(n)]

    def landmarks(self):
        """Deterministic surface-attached landmark positions and colors."""
        rng = np.random.default_rng(self.seed + 101)
        per = max(1, self.n_landmarks // max(len(self.surfaces), 1))
        pts = []
        colors = []
        for s in self.surfaces:
            got = s.sample(per, rng)
            pts.append(got)
            colors.extend([s.color] * len(got))
        pts = np.vstack(pts)[: self.n_landmarks]
        return pts, colors[: self.n_landmarks]

    def to_dict(self):
        return {"surfaces": [s.to_dict() for s in self.surfaces],
                "trajectory": self.trajectory.to_dict(),
                "sensor": self.sensor.to_dict(),
                "camera": self.camera.to_dict(),
                "drift": self.drift.to_dict(),
                "n_frames": self.n_frames,
                "lidar_rate_hz": self.lidar_rate_hz,
                "n_landmarks": self.n_landmarks,
                "seed": self.seed}

    @staticmethod
    def from_dict(d):
        spec = SceneSpec()
        spec.surfaces = [surface_from_dict(s) for s in d.get("surfaces", [])]
        if "trajectory" in d:
            spec.trajectory = Trajectory(**d["trajectory"])
        if "sensor" in d:
            spec.sensor = SensorModel(**d["sensor"])
        if "camera" in d:
            spec.camera = CameraModel(**d["camera"])
        if "drift" in d:
            dd = dict(d["drift"])
            dd["jumps"] = [(int(i), list(tw)) for i, tw in dd.get("jumps", [])]
            spec.drift = DriftSpec(**dd)
        for key in ("n_frames", "lidar_rate_hz", "n_landmarks", "seed"):
            if key in d:
                setattr(spec, key, d[key])
        return spec


def default_room_scene(**overrides) -> SceneSpec:
    """A colored box room with a circular trajectory inside it."""
    room = Box([-2.7, -2.7, -1.3], [2.7, 2.7, 2.3], color=(200, 60, 60))
    spec = SceneSpec(surfaces=[room],
                     trajectory=Trajectory(kind="circle", center=(0.0, 0.0, 0.5),
                                           radius=1.0, angular_speed=0.5))
    for key, value in overrides.items():
        setattr(spec, key, value)
    return spec


def fibonacci_directions(n: int) -> np.ndarray:
    """Deterministic, roughly uniform unit directions on the sphere."""
    k = np.arange(n, dtype=float)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    z = 1.0 - 2.0 * (k + 0.5) / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def raycast_scene(scene: SceneSpec, origins, dirs):
    """Nearest hit distance and surface index per ray (inf / -1 on miss)."""
    best_t = np.full(len(dirs), np.inf)
    best_s = np.full(len(dirs), -1, dtype=int)
    for si, surf in enumerate(scene.surfaces):
        t = surf.raycast(origins, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_s[closer] = si
    return best_t, best_s


def gen_scan(scene: SceneSpec, pose: Pose, frame_index: int = 0,
             seed: int | None = None) -> LidarFrame:
    """Raycast one LiDAR frame from a world pose; points are sensor-local."""
    rng = np.random.default_rng(scene.seed + 7919 * frame_index
                                if seed is None else seed)
    dirs_local = fibonacci_directions(scene.sensor.rays_per_scan)
    dirs_world = dirs_local @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs_world.shape)
    t, sid = raycast_scene(scene, origins, dirs_world)
    ok = np.isfinite(t) & (t <= scene.sensor.max_range)
    if not ok.any():
        raise NoHits(f"scan at frame {frame_index} hit nothing")
    t = t[ok]
    sid = sid[ok]
    if scene.sensor.range_noise > 0:
        t = t + rng.normal(scale=scene.sensor.range_noise, size=len(t))
    points_local = dirs_local[ok] * t[:, None]
    intensities = np.array([scene.surfaces[s].intensity for s in sid])
    ts = pose.timestamp if pose.timestamp is not None else 0.0
    return LidarFrame(frame_index, ts, points_local, intensities)


def gen_observations(scene: SceneSpec, frame: VisualFrame, world_to_camera: Pose,
                     landmarks, rng) -> int:
    """Project visible landmarks into the frame; returns how many landed.

    Visibility requires positive depth, image bounds, and a free line of
    sight (the landmark must be the first surface its viewing ray hits).
    """
    cam = scene.camera
    landmarks = np.asarray(landmarks, dtype=float)
    y = world_to_camera.apply(landmarks)
    in_front = y[:, 2] >= cam.min_depth
    z = np.where(in_front, y[:, 2], 1.0)
    px = np.column_stack([cam.fu * y[:, 0] / z + cam.cu,
                          cam.fv * y[:, 1] / z + cam.cv])
    noisy = px + (rng.normal(scale=cam.pixel_noise, size=px.shape)
                  if cam.pixel_noise > 0 else 0.0)
    in_image = ((noisy[:, 0] >= 0) & (noisy[:, 0] < cam.width)
                & (noisy[:, 1] >= 0) & (noisy[:, 1] < cam.height))
    origin = world_to_camera.inverse().translation
    offsets = landmarks - origin
    dist = np.linalg.norm(offsets, axis=1)
    dirs = offsets / np.maximum(dist, 1e-12)[:, None]
    t_hit, _ = raycast_scene(scene, np.broadcast_to(origin, dirs.shape), dirs)
    unoccluded = np.abs(t_hit - dist) < 1e-6 + 1e-6 * dist
    count = 0
    for fid in np.nonzero(in_front & in_image & unoccluded)[0]:
        frame.observe(int(fid), noisy[fid])
        count += 1
    return count


class SceneColorSampler:
    """Color lookup for a synthetic camera: casts the pixel ray back into
    the scene and returns the hit surface color."""

    def __init__(self, scene: SceneSpec, world_to_camera: Pose,
                 fu, fv, cu, cv):
        self.scene = scene
        self.camera_to_world = world_to_camera.inverse()
        self.fu, self.fv, self.cu, self.cv = fu, fv, cu, cv

    def sample(self, u, v):
        d_cam = np.array([(u - self.cu) / self.fu, (v - self.cv) / self.fv, 1.0])
        d_cam /= np.linalg.norm(d_cam)
        d_world = self.camera_to_world.rotation @ d_cam
        origin = self.camera_to_world.translation
        t, sid = raycast_scene(self.scene, origin[None, :].repeat(1, axis=0),
                               d_world[None, :])
        if sid[0] < 0:
            return None
        return self.scene.surfaces[sid[0]].color
