"""Rigid-motion algebra, pinhole projection, predicted flow and 3D-3D registration.

Conventions: a ``RigidMotion`` maps a point ``x`` to ``R @ x + t``.  Camera
poses map world coordinates into the camera frame (x right, y down, z forward),
so the camera centre is ``-R.T @ t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateConfiguration, InsufficientInliers, NonPositiveDepth

DEPTH_EPS = 1e-9


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(w):
    """Rodrigues formula; accepts a single rotation vector or a stack (..., 3)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    W = skew(w)
    W2 = W @ W
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * W + b * W2


def so3_log(R):
    return Rotation.from_matrix(R).as_rotvec()


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidMotion:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(so3_exp(rotvec), translation)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, X):
        """Transform a point (3,) or a stack of points (N, 3)."""
        X = np.asarray(X, dtype=float)
        return X @ self.rotation.T + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return RigidMotion(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        return compose(self, other)

    @property
    def center(self):
        """Camera centre when this is a world-to-camera pose."""
        return -self.rotation.T @ self.translation

    def is_valid(self, tol=1e-9):
        R = self.rotation
        return bool(
            np.all(np.abs(R.T @ R - np.eye(3)) <= tol) and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def allclose(self, other, atol=1e-9):
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def to_dict(self):
        return {"R": self.rotation.tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["R"]), np.array(d["t"]))


def compose(a: RigidMotion, b: RigidMotion) -> RigidMotion:
    """Motion that applies ``b`` first, then ``a``."""
    return RigidMotion(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(m: RigidMotion) -> RigidMotion:
    return m.inverse()


def retract(m: RigidMotion, delta) -> RigidMotion:
    """Apply a local increment ``(omega, v)``: R <- exp(omega) R, t <- t + v."""
    delta = np.asarray(delta, dtype=float)
    return RigidMotion(so3_exp(delta[:3]) @ m.rotation, m.translation + delta[3:6])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse_matrix(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def project_camera(K: CameraIntrinsics, Xc):
    """Project camera-frame points (..., 3) to pixels (..., 2)."""
    Xc = np.asarray(Xc, dtype=float)
    z = Xc[..., 2]
    if np.any(z <= DEPTH_EPS):
        raise NonPositiveDepth(f"camera-frame depth {np.min(z):.3g} <= {DEPTH_EPS}")
    u = K.fx * Xc[..., 0] / z + K.cx
    v = K.fy * Xc[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def project(K: CameraIntrinsics, pose: RigidMotion, X):
    """Pixel of world point(s) ``X`` seen by a camera with world-to-camera ``pose``."""
    return project_camera(K, pose.apply(X))


def back_project(K: CameraIntrinsics, pixel, depth):
    """Camera-frame point at ``depth`` (z) along the ray through ``pixel``."""
    pixel = np.asarray(pixel, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (pixel[..., 0] - K.cx) / K.fx
    y = (pixel[..., 1] - K.cy) / K.fy
    return np.stack([x * depth, y * depth, depth + 0.0 * x], axis=-1)


def predicted_flow(K: CameraIntrinsics, cam_motion: RigidMotion, pixel, depth):
    """Where a static point at ``pixel`` with depth ``depth`` lands in the next frame.

    ``cam_motion`` maps current camera coordinates to next-frame camera
    coordinates.  Evaluates ``K R K^-1 x + K T / z`` on homogeneous pixels and
    dehomogenises; the primed matrix of the flow model is taken to be ``K^-1``.
    """
    pixel = np.asarray(pixel, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= DEPTH_EPS):
        raise NonPositiveDepth("depth must be positive")
    ones = np.ones(pixel.shape[:-1] + (1,))
    xh = np.concatenate([pixel, ones], axis=-1)
    H = K.matrix @ cam_motion.rotation @ K.inverse_matrix
    p = xh @ H.T + (K.matrix @ cam_motion.translation) / depth[..., None]
    if np.any(p[..., 2] <= DEPTH_EPS):
        raise NonPositiveDepth("point behind camera after motion")
    return p[..., :2] / p[..., 2:3]


def _check_non_collinear(P, name="points"):
    c = P - P.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] == 0.0 or s[1] < 1e-12 * s[0]:
        raise DegenerateConfiguration(f"{name} are collinear or coincident")


def absolute_orientation(src, dst) -> RigidMotion:
    """Least-squares rigid motion M minimising sum ||M src_i - dst_i||^2.

    Closed form via SVD of the cross-covariance with the usual sign
    correction against reflections.
    """
    P = np.asarray(src, dtype=float).reshape(-1, 3)
    Q = np.asarray(dst, dtype=float).reshape(-1, 3)
    if P.shape != Q.shape:
        raise ValueError("point sets differ in size")
    if len(P) < 3:
        raise DegenerateConfiguration("need at least 3 point pairs")
    _check_non_collinear(P, "source points")
    _check_non_collinear(Q, "target points")
    mp = P.mean(axis=0)
    mq = Q.mean(axis=0)
    H = (P - mp).T @ (Q - mq)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidMotion(R, mq - R @ mp)


def _kabsch_minimal(P, Q):
    """Batched absolute orientation for (m, 3, 3) minimal samples; returns (R, t, ok)."""
    mp = P.mean(axis=1, keepdims=True)
    mq = Q.mean(axis=1, keepdims=True)
    ok = np.ones(len(P), dtype=bool)
    for C in (P - mp, Q - mq):
        s = np.linalg.svd(C, compute_uv=False)
        ok &= (s[:, 0] > 0) & (s[:, 1] >= 1e-12 * s[:, 0])
    H = np.einsum("mki,mkj->mij", P - mp, Q - mq)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("mji,mkj->mik", Vt, U)))
    d[d == 0] = 1.0
    D = np.zeros((len(P), 3, 3))
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.einsum("mji,mjk,mlk->mil", Vt, D, U)
    t = mq[:, 0] - np.einsum("mij,mj->mi", R, mp[:, 0])
    return R, t, ok


def ransac_registration(src, dst, max_iters=200, inlier_thresh=0.05, seed=0):
    """Robust 3D-3D registration from minimal 3-point samples.

    Returns ``(motion, inlier_mask)``.  The best-consensus hypothesis is refit
    on its inliers; a fixed iteration count keeps runtimes deterministic.
    """
    P = np.asarray(src, dtype=float).reshape(-1, 3)
    Q = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(P)
    if n < 3:
        raise InsufficientInliers(f"only {n} pairs")
    if inlier_thresh <= 0:
        raise ValueError("inlier_thresh must be positive")
    rng = np.random.default_rng(seed)
    thresh2 = inlier_thresh**2
    idx = np.array([rng.choice(n, size=3, replace=False) for _ in range(max_iters)]).reshape(-1, 3)
    R, t, ok = _kabsch_minimal(P[idx], Q[idx])
    if not ok.any():
        raise InsufficientInliers("best consensus 0 < 3")
    R, t = R[ok], t[ok]
    r2 = np.sum((np.matmul(P[None], R.transpose(0, 2, 1)) + t[:, None, :] - Q[None]) ** 2, axis=2)
    masks = r2 < thresh2
    counts = masks.sum(axis=1)
    errs = np.where(masks, r2, 0.0).sum(axis=1)
    # most inliers, then lowest inlier error, then earliest hypothesis
    best = np.lexsort((np.arange(len(counts)), errs, -counts))[0]
    best_mask, best_count = masks[best], int(counts[best])
    if best_count < 3:
        raise InsufficientInliers(f"best consensus {best_count} < 3")
    M = absolute_orientation(P[best_mask], Q[best_mask])
    # one re-scoring pass with the refit model
    r2 = np.sum((M.apply(P) - Q) ** 2, axis=1)
    mask = r2 < thresh2
    if mask.sum() >= 3 and not np.array_equal(mask, best_mask):
        try:
            M2 = absolute_orientation(P[mask], Q[mask])
            M, best_mask = M2, mask
        except DegenerateConfiguration:
            pass
    return M, best_mask


def random_rotation(rng):
    return Rotation.random(random_state=np.random.default_rng(rng).integers(2**31)).as_matrix()


def quat_xyzw(R):
    return Rotation.from_matrix(R).as_quat()


def rotation_from_quat_xyzw(q):
    return Rotation.from_quat(q).as_matrix()
