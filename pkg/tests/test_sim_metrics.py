import numpy as np
import pytest

from voxelsfm.errors import LengthMismatch, NoHits
from voxelsfm.geom import Pose, so3_exp
from voxelsfm.metrics import ape_rpe
from voxelsfm.sim import (
    Box,
    PlanePatch,
    SceneColorSampler,
    SceneSpec,
    Sphere,
    Trajectory,
    default_room_scene,
    fibonacci_directions,
    gen_scan,
    raycast_scene,
)


def test_scan_on_infinite_ish_plane_satisfies_plane_equation():
    plane = PlanePatch([-500.0, -500.0, 0.0], [1, 0, 0], [0, 1, 0],
                       1000.0, 1000.0)
    scene = SceneSpec(surfaces=[plane])
    scene.sensor.range_noise = 0.0
    pose = Pose(np.eye(3), [0.0, 0.0, 2.0], timestamp=0.0)
    frame = gen_scan(scene, pose)
    world = pose.apply(frame.points)
    assert np.abs(world[:, 2]).max() < 1e-9
    assert len(frame) > 100


def test_scan_in_closed_box_matches_analytic_intersections():
    scene = default_room_scene()
    scene.sensor.range_noise = 0.0
    pose = Pose(so3_exp([0.1, -0.05, 0.4]), [0.3, -0.2, 0.6], timestamp=0.0)
    frame = gen_scan(scene, pose)
    # All rays hit: the box is closed around the sensor.
    assert len(frame) == scene.sensor.rays_per_scan
    dirs = fibonacci_directions(scene.sensor.rays_per_scan)
    t_expected, _ = raycast_scene(scene, np.broadcast_to(pose.translation,
                                                         (len(dirs), 3)),
                                  dirs @ pose.rotation.T)
    t_got = np.linalg.norm(frame.points, axis=1)
    assert np.abs(np.sort(t_got) - np.sort(t_expected)).max() < 1e-9


def test_scan_empty_scene_raises():
    scene = SceneSpec(surfaces=[])
    with pytest.raises(NoHits):
        gen_scan(scene, Pose.identity(timestamp=0.0))


def test_scan_deterministic_given_seed():
    scene = default_room_scene()
    pose = scene.trajectory.pose_at(0.7)
    a = gen_scan(scene, pose, frame_index=3)
    b = gen_scan(scene, pose, frame_index=3)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.intensities, b.intensities)


def test_sphere_and_patch_raycasts():
    sphere = Sphere([0.0, 0.0, 5.0], 1.0)
    t = sphere.raycast(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))
    assert abs(t[0] - 4.0) < 1e-12
    patch = PlanePatch([1.0, -1.0, 3.0], [1, 0, 0], [0, 1, 0], 2.0, 2.0)
    t = patch.raycast(np.zeros((2, 3)),
                      np.array([[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]]))
    assert not np.isfinite(t[0])  # misses the bounded patch at x=0 < 1
    assert abs(t[1] - 3.0 / 0.8) < 1e-12


def test_scene_spec_roundtrip():
    scene = default_room_scene()
    scene.surfaces.append(Sphere([1.0, 2.0, 3.0], 0.5, color=(10, 20, 30)))
    scene.drift.jumps = [(5, [0, 0, 0, 0.5, 0, 0])]
    d = scene.to_dict()
    back = SceneSpec.from_dict(d)
    assert back.to_dict() == d


def test_color_sampler_sees_surface_color():
    scene = default_room_scene()
    pose = Pose.identity(timestamp=0.0)  # camera at origin looking +z
    cam = scene.camera
    sampler = SceneColorSampler(scene, pose, cam.fu, cam.fv, cam.cu, cam.cv)
    color = sampler.sample(cam.cu, cam.cv)
    assert color == scene.surfaces[0].color


def circle(n, noise=0.0, seed=0, radius=5.0):
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(n):
        ang = 2 * np.pi * i / n
        t = np.array([radius * np.cos(ang), radius * np.sin(ang), 0.0])
        if noise > 0:
            t = t + rng.normal(scale=noise, size=3)
        poses.append(Pose(so3_exp([0, 0, ang]), t, timestamp=0.1 * i))
    return poses


def test_metrics_zero_for_identical():
    gt = circle(50)
    m = ape_rpe(gt, gt)
    assert m.ape_mae == 0.0 and m.ape_rmse == 0.0
    assert m.rpe_mae == 0.0 and m.rpe_rmse == 0.0


def test_metrics_constant_offset():
    gt = circle(50)
    offset = np.array([1.0, 0.0, 0.0])
    est = [Pose(p.rotation, p.translation + offset, p.timestamp) for p in gt]
    aligned = ape_rpe(est, gt, align=True)
    assert aligned.ape_mae < 1e-9
    raw = ape_rpe(est, gt, align=False)
    assert abs(raw.ape_mae - 1.0) < 1e-12
    assert abs(raw.ape_rmse - 1.0) < 1e-12


def test_metrics_rmse_of_isotropic_noise():
    rng = np.random.default_rng(1)
    gt = circle(10000)
    sigma = 0.1
    est = [Pose(p.rotation, p.translation + rng.normal(scale=sigma, size=3),
                p.timestamp) for p in gt]
    m = ape_rpe(est, gt, align=False)
    assert abs(m.ape_rmse - sigma * np.sqrt(3)) < 0.05 * sigma * np.sqrt(3)


def test_metrics_rpe_invariant_to_rigid_transform_of_estimate():
    rng = np.random.default_rng(2)
    gt = circle(60)
    est = circle(60, noise=0.05, seed=3)
    G = Pose(so3_exp(rng.normal(size=3)), rng.normal(scale=10, size=3))
    moved = [G.compose(p).with_timestamp(p.timestamp) for p in est]
    m1 = ape_rpe(est, gt, align=False)
    m2 = ape_rpe(moved, gt, align=False)
    assert abs(m1.rpe_mae - m2.rpe_mae) < 1e-9
    assert abs(m1.rpe_rmse - m2.rpe_rmse) < 1e-9


def test_metrics_symmetric_under_joint_transform():
    rng = np.random.default_rng(4)
    gt = circle(40)
    est = circle(40, noise=0.03, seed=5)
    G = Pose(so3_exp(rng.normal(size=3)), rng.normal(scale=5, size=3))
    m1 = ape_rpe(est, gt, align=True)
    m2 = ape_rpe([G.compose(p).with_timestamp(p.timestamp) for p in est],
                 [G.compose(p).with_timestamp(p.timestamp) for p in gt],
                 align=True)
    assert abs(m1.ape_mae - m2.ape_mae) < 1e-9
    assert abs(m1.rpe_mae - m2.rpe_mae) < 1e-9


def test_metrics_length_mismatch():
    gt = circle(10)
    with pytest.raises(LengthMismatch):
        ape_rpe(gt[:-1], gt)
    shifted = [p.with_timestamp(p.timestamp + 1.0) for p in gt]
    with pytest.raises(LengthMismatch):
        ape_rpe(shifted, gt)


def test_metrics_rmse_not_below_mae():
    est = circle(30, noise=0.05, seed=6)
    gt = circle(30)
    m = ape_rpe(est, gt)
    assert m.ape_rmse >= m.ape_mae >= 0
    assert m.rpe_rmse >= m.rpe_mae >= 0
