"""Rigid-body transforms on SE(3), a symmetric 3x3 eigensolver, pinhole
projection, and closed-form similarity alignment.

Twist vectors are ordered rotation-first: ``xi = (wx, wy, wz, vx, vy, vz)``.
Optimizer increments are applied as left perturbations, ``exp(xi) o pose``.
All values are immutable after construction and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateInput

DEPTH_FLOOR = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``x_out = rotation @ x + translation``.

    ``timestamp`` is carried along for frame bookkeeping and takes no part
    in the algebra.
    """

    rotation: np.ndarray
    translation: np.ndarray
    timestamp: float | None = None

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(np.asarray(self.translation, dtype=float).reshape(3))
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity(timestamp: float | None = None) -> "Pose":
        return Pose(np.eye(3), np.zeros(3), timestamp)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.rotation @ x + self.translation
        return x @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        ts = self.timestamp if self.timestamp is not None else other.timestamp
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation,
                    ts)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, self.timestamp)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def with_timestamp(self, timestamp: float | None) -> "Pose":
        return Pose(self.rotation, self.translation, timestamp)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)


def se3_compose(a: Pose, b: Pose) -> Pose:
    """(a o b) so that (a o b)(x) == a(b(x))."""
    return a.compose(b)


def so3_hat(w: np.ndarray) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix from an axis-angle vector (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = so3_hat(w)
    if theta < 1e-12:
        return np.eye(3) + W + 0.5 * (W @ W)
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * W + B * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix; |result| in [0, pi]."""
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-10:
        # First-order: R ~ I + hat(w)
        return np.array([R[2, 1] - R[1, 2],
                         R[0, 2] - R[2, 0],
                         R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # Near pi the antisymmetric part vanishes; use the symmetric part.
        S = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(S), 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = S[:, k] / axis[k]
            n = np.linalg.norm(axis)
            if n > 0:
                axis = axis / n
        w = axis * theta
        # Fix the sign using the antisymmetric residue.
        v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(v, w) < 0:
            w = -w
        return w
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v * theta / (2.0 * np.sin(theta))


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = so3_hat(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    A = (1.0 - np.cos(theta)) / theta**2
    B = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + A * W + B * (W @ W)


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = so3_hat(w)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    half = theta / 2.0
    cot = half / np.tan(half)
    return np.eye(3) - 0.5 * W + (1.0 - cot) / theta**2 * (W @ W)


def se3_exp(twist: np.ndarray, timestamp: float | None = None) -> Pose:
    """Exponential map; ``twist = (w, v)`` with rotation part first."""
    twist = np.asarray(twist, dtype=float).reshape(6)
    w, v = twist[:3], twist[3:]
    R = so3_exp(w)
    t = _so3_left_jacobian(w) @ v
    return Pose(R, t, timestamp)


def se3_log(p: Pose) -> np.ndarray:
    """Inverse of :func:`se3_exp` for rotations below pi."""
    w = so3_log(p.rotation)
    v = _so3_left_jacobian_inv(w) @ p.translation
    return np.concatenate([w, v])


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    return float(np.linalg.norm(so3_log(np.asarray(R, dtype=float))))


def rotation_between(a: Pose, b: Pose) -> float:
    """Geodesic angle between the orientations of two poses (radians)."""
    return rotation_angle(a.rotation.T @ b.rotation)


@dataclass(frozen=True)
class EigenSystem3:
    """Sorted eigensystem of a symmetric 3x3 matrix.

    ``values`` holds (e1, e2, e3) descending, negatives clamped to zero;
    ``vectors[:, i]`` is the unit eigenvector of ``values[i]``. The minimum
    eigenvector ``vectors[:, 2]`` acts as the local surface normal.
    """

    values: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "vectors", _frozen(self.vectors))

    @property
    def normal(self) -> np.ndarray:
        return self.vectors[:, 2]

    def reconstruct(self) -> np.ndarray:
        return self.vectors @ np.diag(self.values) @ self.vectors.T


def eig3_sym(m: np.ndarray, clamp: float = 1e-12) -> EigenSystem3:
    """Eigendecomposition of a symmetric 3x3 matrix, sorted descending.

    The input is symmetrized defensively; eigenvalues below ``clamp`` are
    set to zero. Eigenvector signs are normalized so the largest-magnitude
    component of each vector is positive (stable output for dumps).
    """
    m = np.asarray(m, dtype=float)
    m = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(m)  # ascending
    order = [2, 1, 0]
    vals = vals[order]
    vecs = vecs[:, order]
    vals = np.where(vals < clamp, 0.0, vals)
    for i in range(3):
        k = int(np.argmax(np.abs(vecs[:, i])))
        if vecs[k, i] < 0:
            vecs[:, i] = -vecs[:, i]
    return EigenSystem3(vals, vecs)


@dataclass(frozen=True)
class Similarity:
    """Scaled rigid transform: ``x_out = scale * rotation @ x + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", _frozen(self.rotation))
        object.__setattr__(self, "translation",
                           _frozen(np.asarray(self.translation, dtype=float).reshape(3)))

    @staticmethod
    def identity() -> "Similarity":
        return Similarity(1.0, np.eye(3), np.zeros(3))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.scale * (self.rotation @ x) + self.translation
        return self.scale * (x @ self.rotation.T) + self.translation

    def apply_pose(self, p: Pose) -> Pose:
        """Map a body-to-world pose into the target frame (scale acts on
        translation only, keeping the rotation orthonormal)."""
        return Pose(self.rotation @ p.rotation,
                    self.scale * (self.rotation @ p.translation) + self.translation,
                    p.timestamp)

    def inverse(self) -> "Similarity":
        Rt = self.rotation.T
        return Similarity(1.0 / self.scale, Rt, -Rt @ self.translation / self.scale)


def umeyama_align(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Similarity:
    """Closed-form least-squares similarity fit ``dst ~ s R src + t``.

    Raises DegenerateInput for fewer than 3 correspondences or collinear
    points, where the rotation is not determined.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise DegenerateInput("src/dst size mismatch")
    n = src.shape[0]
    if n < 3:
        raise DegenerateInput(f"need at least 3 correspondences, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    ds = src - mu_s
    dd = dst - mu_d
    cov = dd.T @ ds / n
    var_s = (ds * ds).sum() / n
    U, S, Vt = np.linalg.svd(cov)
    # Collinear sources leave the rotation about the line unconstrained.
    if S[1] < 1e-12 * max(S[0], 1e-300) or S[0] == 0.0:
        raise DegenerateInput("source points are collinear")
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    if with_scale:
        if var_s <= 0:
            raise DegenerateInput("source points are coincident")
        s = float(np.trace(np.diag(S) @ D) / var_s)
        if s <= 0:
            raise DegenerateInput("recovered scale is non-positive")
    else:
        s = 1.0
    t = mu_d - s * (R @ mu_s)
    return Similarity(s, R, t)


def project_pinhole(fu: float, fv: float, cu: float, cv: float,
                    p: Pose, x: np.ndarray,
                    depth_floor: float = DEPTH_FLOOR) -> np.ndarray:
    """Project a 3D point through pose ``p`` into pixel coordinates.

    ``p`` maps the point into camera coordinates (z forward). Raises
    BehindCamera when the transformed depth falls at or below the floor.
    """
    y = p.apply(np.asarray(x, dtype=float))
    if y[2] <= depth_floor:
        raise BehindCamera(f"depth {y[2]:.3g} <= {depth_floor:.3g}")
    return np.array([fu * y[0] / y[2] + cu, fv * y[1] / y[2] + cv])


def project_pinhole_many(fu: float, fv: float, cu: float, cv: float,
                         p: Pose, xs: np.ndarray,
                         depth_floor: float = DEPTH_FLOOR):
    """Vectorized projection; returns (pixels (N,2), valid mask (N,)).

    Points at or behind the depth floor are masked out instead of raising.
    """
    ys = p.apply(np.asarray(xs, dtype=float).reshape(-1, 3))
    valid = ys[:, 2] > depth_floor
    z = np.where(valid, ys[:, 2], 1.0)
    px = np.column_stack([fu * ys[:, 0] / z + cu, fv * ys[:, 1] / z + cv])
    return px, valid


def _quat_from_rotation(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) from a rotation matrix; w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s,
                      0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0)) * 2.0
        q = np.zeros(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _rotation_from_quat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a quaternion (x, y, z, w)."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
