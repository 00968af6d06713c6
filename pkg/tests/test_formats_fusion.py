import io
import struct

import numpy as np
import pytest

from voxelsfm.errors import MalformedFile, ParseError
from voxelsfm.formats import (
    read_cameras,
    read_kitti_bin,
    read_timestamps,
    read_tracks,
    read_trajectory,
    write_cameras,
    write_kitti_bin,
    write_timestamps,
    write_tracks,
    write_trajectory,
)
from voxelsfm.fusion import (
    FusedCloud,
    ImageSampler,
    colorize_and_fuse,
    grid_downsample,
    read_ply,
    write_ply,
)
from voxelsfm.geom import Pose, rotation_angle, so3_exp
from voxelsfm.registration import LidarFrame
from voxelsfm.sim import SceneColorSampler, default_room_scene, gen_scan
from voxelsfm.visual import VisualFrame


def test_kitti_bin_single_point(tmp_path):
    p = tmp_path / "scan.bin"
    p.write_bytes(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
    frame = read_kitti_bin(p, frame_index=4, timestamp=0.4)
    assert len(frame) == 1
    assert np.allclose(frame.points[0], [1, 2, 3])
    assert abs(frame.intensities[0] - 127.5) < 1e-6
    assert frame.frame_index == 4


def test_kitti_bin_empty_file_rejected_by_frame_invariant(tmp_path):
    p = tmp_path / "empty.bin"
    p.write_bytes(b"")
    with pytest.raises(ValueError):
        read_kitti_bin(p)


def test_kitti_bin_malformed_size(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\x00" * 17)
    with pytest.raises(MalformedFile):
        read_kitti_bin(p)


def test_kitti_bin_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    frame = LidarFrame(0, 0.0, rng.normal(size=(50, 3)),
                       rng.uniform(0, 255, size=50))
    p = tmp_path / "rt.bin"
    write_kitti_bin(p, frame)
    back = read_kitti_bin(p)
    assert np.abs(back.points - frame.points).max() < 1e-6
    assert np.abs(back.intensities - frame.intensities).max() < 1e-4


def test_trajectory_kitti_identity_line(tmp_path):
    p = tmp_path / "traj.txt"
    write_trajectory(p, [Pose.identity()], fmt="kitti")
    assert p.read_text().split() == \
        "1 0 0 0 0 1 0 0 0 0 1 0".split()


def random_poses(n, seed):
    rng = np.random.default_rng(seed)
    return [Pose(so3_exp(rng.normal(size=3)), rng.normal(scale=10, size=3),
                 timestamp=0.1 * i) for i in range(n)]


@pytest.mark.parametrize("fmt", ["kitti", "tum"])
def test_trajectory_roundtrip(tmp_path, fmt):
    poses = random_poses(1000, 1)
    p = tmp_path / f"traj_{fmt}.txt"
    write_trajectory(p, poses, fmt=fmt)
    back = read_trajectory(p, fmt=fmt)
    assert len(back) == len(poses)
    worst_t = max(np.abs(a.translation - b.translation).max()
                  for a, b in zip(back, poses))
    worst_r = max(np.abs(a.rotation - b.rotation).max()
                  for a, b in zip(back, poses))
    assert worst_t < 1e-9
    assert worst_r < 1e-9


def test_trajectory_parse_error_carries_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\nnot a pose\n")
    with pytest.raises(ParseError) as info:
        read_trajectory(p, fmt="kitti")
    assert info.value.line == 2


def test_tracks_and_cameras_roundtrip(tmp_path):
    rows = [(0, 1, 7, 10.5, 20.25), (1, 2, 9, 0.0, 479.0)]
    p = tmp_path / "tracks.txt"
    write_tracks(p, rows)
    assert read_tracks(p) == rows
    cams = [(0, 1, 0.0, 600.0, 600.0, 320.0, 240.0, 640, 480)]
    c = tmp_path / "cams.txt"
    write_cameras(c, cams)
    assert read_cameras(c) == cams
    t = tmp_path / "times.txt"
    write_timestamps(t, [0.0, 0.1, 0.2])
    assert np.allclose(read_timestamps(t), [0.0, 0.1, 0.2])


def test_fusion_gray_without_camera():
    pts = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    frame = LidarFrame(0, 0.0, pts, np.array([100.0, 200.0]))
    cloud, report = colorize_and_fuse([(frame, Pose.identity())], [])
    assert np.array_equal(cloud.points, pts)
    assert tuple(cloud.colors[0]) == (100, 100, 100)
    assert tuple(cloud.colors[1]) == (200, 200, 200)
    assert report.fused_frames == 1


def test_fusion_missing_pose_skipped():
    pts = np.ones((3, 3))
    fa = LidarFrame(0, 0.0, pts, np.full(3, 10.0))
    fb = LidarFrame(1, 0.1, pts, np.full(3, 10.0))
    cloud, report = colorize_and_fuse([(fa, Pose.identity()), (fb, None)], [])
    assert report.skipped_frames == [(1, "missing pose")]
    assert len(cloud) == 3


def test_fusion_colors_from_synthetic_wall():
    scene = default_room_scene()
    scene.sensor.range_noise = 0.0
    pose = scene.trajectory.pose_at(0.0)
    scan = gen_scan(scene, pose)
    cam = VisualFrame(0, 1, scan.timestamp, scene.camera.fu, scene.camera.fv,
                      scene.camera.cu, scene.camera.cv,
                      width=scene.camera.width, height=scene.camera.height)
    cam.pose = pose.inverse()  # camera co-located with the sensor
    sampler = SceneColorSampler(scene, cam.pose, cam.fu, cam.fv, cam.cu, cam.cv)
    cloud, report = colorize_and_fuse([(scan, pose)], [cam], {0: sampler})
    assert report.colored_points > 0
    colored = cloud.colors[np.any(cloud.colors != cloud.colors[:, :1], axis=1) |
                           (cloud.colors[:, 0] == 200)]
    # Every colored point took the wall color.
    wall = np.array(scene.surfaces[0].color, dtype=np.uint8)
    n_wall = int(np.sum(np.all(cloud.colors == wall, axis=1)))
    assert n_wall == report.colored_points


def test_fusion_point_behind_camera_falls_back_to_gray():
    pts = np.array([[0.0, 0.0, -5.0]])
    frame = LidarFrame(0, 0.0, pts, np.array([50.0]))
    cam = VisualFrame(0, 1, 0.0, 100, 100, 50, 50, width=100, height=100)
    cam.pose = Pose.identity()
    sampler = ImageSampler(np.full((100, 100, 3), 255.0))
    cloud, report = colorize_and_fuse([(frame, Pose.identity())], [cam],
                                      {0: sampler})
    assert tuple(cloud.colors[0]) == (50, 50, 50)
    assert report.colored_points == 0


def test_fusion_equivariance_and_determinism():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(40, 3))
    frame = LidarFrame(0, 0.0, pts, np.full(40, 90.0))
    pose = Pose(so3_exp([0.1, 0.2, 0.3]), [1.0, -2.0, 0.5])
    c1, _ = colorize_and_fuse([(frame, pose)], [])
    c2, _ = colorize_and_fuse([(frame, pose)], [])
    assert np.array_equal(c1.points, c2.points)
    G = Pose(so3_exp(rng.normal(size=3)), rng.normal(scale=4, size=3))
    c3, _ = colorize_and_fuse([(frame, G.compose(pose))], [])
    assert np.abs(c3.points - G.apply(c1.points)).max() < 1e-9
    assert np.array_equal(c1.colors, c3.colors)


def test_fusion_duplicate_frame_duplicates_geometry():
    pts = np.array([[1.0, 2.0, 3.0]])
    fa = LidarFrame(0, 0.0, pts, np.array([10.0]))
    fb = LidarFrame(1, 0.0, pts, np.array([10.0]))
    cloud, _ = colorize_and_fuse([(fa, Pose.identity()), (fb, Pose.identity())], [])
    assert len(cloud) == 2
    assert np.array_equal(cloud.points[0], cloud.points[1])


def test_image_sampler_bilinear():
    img = np.zeros((2, 2, 3))
    img[0, 0] = [0, 0, 0]
    img[0, 1] = [100, 100, 100]
    img[1, 0] = [200, 200, 200]
    img[1, 1] = [100, 100, 100]
    s = ImageSampler(img)
    assert s.sample(0.5, 0.5) == (100, 100, 100)
    assert s.sample(0, 0) == (0, 0, 0)
    assert s.sample(5, 0) is None


@pytest.mark.parametrize("ascii_format", [False, True])
def test_ply_roundtrip(tmp_path, ascii_format):
    rng = np.random.default_rng(3)
    cloud = FusedCloud(rng.normal(size=(20, 3)),
                       rng.integers(0, 256, size=(20, 3)).astype(np.uint8),
                       rng.uniform(0, 255, size=20),
                       np.arange(20))
    p = tmp_path / ("c.ply" if not ascii_format else "c_ascii.ply")
    write_ply(cloud, p, ascii_format=ascii_format)
    back = read_ply(p)
    assert len(back) == 20
    assert np.abs(back.points - cloud.points).max() < 1e-5
    assert np.array_equal(back.colors, cloud.colors)
    assert np.abs(back.intensities - cloud.intensities).max() < 1e-4


def test_ply_binary_layout(tmp_path):
    cloud = FusedCloud(np.array([[1.0, 2.0, 3.0]]),
                       np.array([[255, 0, 7]], dtype=np.uint8),
                       np.array([42.0]), np.array([0]))
    p = tmp_path / "one.ply"
    write_ply(cloud, p)
    raw = p.read_bytes()
    body = raw.split(b"end_header\n", 1)[1]
    assert len(body) == 4 * 3 + 3 + 4
    x, y, z = struct.unpack("<3f", body[:12])
    assert (x, y, z) == (1.0, 2.0, 3.0)
    assert body[12:15] == bytes([255, 0, 7])
    assert struct.unpack("<f", body[15:])[0] == 42.0


def test_grid_downsample():
    pts = np.array([[0.0, 0, 0], [0.01, 0, 0], [1.0, 0, 0]])
    cloud = FusedCloud(pts, np.zeros((3, 3), np.uint8), np.zeros(3),
                       np.zeros(3, np.int64))
    down = grid_downsample(cloud, 0.5)
    assert len(down) == 2
