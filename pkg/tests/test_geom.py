import numpy as np
import pytest

from voxelsfm import geom
from voxelsfm.errors import BehindCamera, DegenerateInput
from voxelsfm.geom import (
    EigenSystem3,
    Pose,
    Similarity,
    eig3_sym,
    project_pinhole,
    se3_compose,
    se3_exp,
    se3_log,
    umeyama_align,
)


def random_pose(rng, trans_scale=5.0, rot_scale=np.pi * 0.9):
    w = rng.normal(size=3)
    n = np.linalg.norm(w)
    if n > 0:
        w = w / n * rng.uniform(0, rot_scale)
    return Pose(geom.so3_exp(w), rng.normal(scale=trans_scale, size=3))


def test_identity_compose():
    p = se3_compose(Pose.identity(), Pose.identity())
    assert np.allclose(p.matrix(), np.eye(4))


def test_inverse_compose_is_identity():
    rng = np.random.default_rng(0)
    a = random_pose(rng)
    p = se3_compose(a, a.inverse())
    assert np.allclose(p.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(p.translation, 0.0, atol=1e-12)


def test_compose_matches_double_application():
    rng = np.random.default_rng(1)
    a, b = random_pose(rng), random_pose(rng)
    ab = se3_compose(a, b)
    pts = rng.normal(size=(100, 3))
    assert np.allclose(ab.apply(pts), a.apply(b.apply(pts)), atol=1e-10)


def test_compose_associative():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = se3_compose(se3_compose(a, b), c)
        rhs = se3_compose(a, se3_compose(b, c))
        assert np.allclose(lhs.matrix(), rhs.matrix(), atol=1e-10)


def test_pose_invariants():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = random_pose(rng)
        assert np.allclose(p.rotation.T @ p.rotation, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(p.rotation) - 1.0) < 1e-9


def test_exp_zero_is_identity():
    p = se3_exp(np.zeros(6))
    assert np.allclose(p.matrix(), np.eye(4))


def test_exp_quarter_turn_about_z():
    p = se3_exp([0, 0, np.pi / 2, 0, 0, 0])
    expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    assert np.allclose(p.rotation, expected, atol=1e-12)
    assert np.allclose(p.translation, 0.0)


def test_exp_log_roundtrip():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        w = rng.normal(size=3)
        n = np.linalg.norm(w)
        if n > 0:
            w = w / n * rng.uniform(0, 2.999)
        xi = np.concatenate([w, rng.normal(scale=3.0, size=3)])
        err = np.abs(se3_log(se3_exp(xi)) - xi).max()
        worst = max(worst, err)
    assert worst < 1e-9


def test_log_small_and_near_pi_rotations():
    for theta in [1e-12, 1e-9, 1e-6, np.pi - 1e-7, np.pi - 1e-3]:
        axis = np.array([1.0, -2.0, 0.5])
        axis /= np.linalg.norm(axis)
        w = axis * theta
        assert np.allclose(geom.so3_log(geom.so3_exp(w)), w, atol=1e-6 * max(theta, 1.0))


def test_eig3_identity():
    es = eig3_sym(np.eye(3))
    assert np.allclose(es.values, [1, 1, 1])


def test_eig3_diagonal():
    es = eig3_sym(np.diag([4.0, 1.0, 0.0]))
    assert np.allclose(es.values, [4, 1, 0])
    # Eigenvectors are the coordinate axes (up to sign normalization).
    assert np.allclose(np.abs(es.vectors), np.eye(3), atol=1e-12)


def test_eig3_reconstruction_psd():
    rng = np.random.default_rng(5)
    for _ in range(500):
        A = rng.normal(size=(3, 3))
        m = A @ A.T
        es = eig3_sym(m)
        assert np.abs(es.reconstruct() - m).max() < 1e-8
        assert es.values[0] >= es.values[1] >= es.values[2] >= 0
        # Pairwise orthogonality.
        G = es.vectors.T @ es.vectors
        assert np.allclose(G, np.eye(3), atol=1e-8)


def test_eig3_trace_and_det():
    rng = np.random.default_rng(6)
    for _ in range(100):
        A = rng.normal(size=(3, 3))
        m = A @ A.T + np.eye(3) * 0.1
        es = eig3_sym(m)
        assert abs(es.values.sum() - np.trace(m)) < 1e-9 * max(1.0, abs(np.trace(m)))
        det = np.linalg.det(m)
        assert abs(np.prod(es.values) - det) < 1e-8 * max(abs(det), 1.0)


def test_umeyama_identity():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(10, 3))
    sim = umeyama_align(pts, pts)
    assert abs(sim.scale - 1.0) < 1e-12
    assert np.allclose(sim.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(sim.translation, 0.0, atol=1e-12)


def test_umeyama_pure_scale():
    rng = np.random.default_rng(8)
    pts = rng.normal(size=(10, 3))
    sim = umeyama_align(pts, 2.0 * pts)
    assert abs(sim.scale - 2.0) < 1e-12
    assert np.allclose(sim.rotation, np.eye(3), atol=1e-10)


def test_umeyama_recovers_random_similarity():
    rng = np.random.default_rng(9)
    for _ in range(25):
        src = rng.normal(size=(30, 3))
        truth = Similarity(rng.uniform(0.3, 3.0),
                           geom.so3_exp(rng.normal(size=3)),
                           rng.normal(size=3))
        dst = truth.apply(src) + rng.normal(scale=1e-6, size=src.shape)
        sim = umeyama_align(src, dst)
        assert abs(sim.scale - truth.scale) < 1e-4
        assert np.abs(sim.rotation - truth.rotation).max() < 1e-4
        assert np.abs(sim.translation - truth.translation).max() < 1e-4


def test_umeyama_no_scale_returns_exactly_one():
    rng = np.random.default_rng(10)
    src = rng.normal(size=(12, 3))
    dst = 1.7 * src
    sim = umeyama_align(src, dst, with_scale=False)
    assert sim.scale == 1.0


def test_umeyama_collinear_raises():
    line = np.outer(np.arange(5.0), np.array([1.0, 2.0, 3.0]))
    with pytest.raises(DegenerateInput):
        umeyama_align(line, line * 2.0)
    with pytest.raises(DegenerateInput):
        umeyama_align(line[:2], line[:2])


def test_project_pinhole_basic():
    px = project_pinhole(1, 1, 0, 0, Pose.identity(), [0, 0, 1.0])
    assert np.allclose(px, [0, 0])
    px = project_pinhole(2, 2, 10, 20, Pose.identity(), [1.0, 1.0, 2.0])
    assert np.allclose(px, [11, 21])


def test_project_pinhole_behind_camera():
    with pytest.raises(BehindCamera):
        project_pinhole(1, 1, 0, 0, Pose.identity(), [0.0, 0.0, 0.0])
    with pytest.raises(BehindCamera):
        project_pinhole(1, 1, 0, 0, Pose.identity(), [0.0, 0.0, -2.0])


def test_similarity_roundtrip():
    rng = np.random.default_rng(11)
    sim = Similarity(0.5, geom.so3_exp(rng.normal(size=3)), rng.normal(size=3))
    pts = rng.normal(size=(20, 3))
    back = sim.inverse().apply(sim.apply(pts))
    assert np.allclose(back, pts, atol=1e-12)


def test_quaternion_roundtrip():
    rng = np.random.default_rng(12)
    for _ in range(200):
        R = random_pose(rng).rotation
        q = geom._quat_from_rotation(R)
        assert np.abs(geom._rotation_from_quat(q) - R).max() < 1e-12
