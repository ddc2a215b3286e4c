"""Residual families of the refinement objective with analytic Jacobians.

Pose parameters are perturbed on the left: R <- exp(w) R, t <- t + v, so the
6-vector (w, v) is the local pose coordinate used by every Jacobian here.
Vectorized forms take stacked inputs along the first axis.
"""
import numpy as np

from ..errors import MismatchedBody
from ..geometry import DEPTH_EPS, CameraIntrinsics, RigidMotion

BC_VARIANTS = ("BC1", "BC2", "BC3", "BC4")


def _skew_batch(v):
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -v[:, 2], v[:, 1]
    S[:, 1, 0], S[:, 1, 2] = v[:, 2], -v[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -v[:, 1], v[:, 0]
    return S


def transform_jac(R, t, X, Rp=None, tp=None):
    """x = [Rp, tp] (R X + t) with Jacobians w.r.t. the (w, v) pose update and X.

    Returns ``(x, J_pose (n,3,6), J_point (n,3,3))``.
    """
    RX = (R @ X[:, :, None])[:, :, 0]
    xw = RX + t
    J_pose = np.concatenate([-_skew_batch(RX), np.broadcast_to(np.eye(3), RX.shape[:1] + (3, 3))], axis=2)
    J_point = R
    if Rp is None:
        return xw, J_pose, np.array(J_point)
    x = (Rp @ xw[:, :, None])[:, :, 0] + tp
    return x, Rp @ J_pose, Rp @ J_point


def projection_jac(K: CameraIntrinsics, xc):
    """Pixel projection of camera points and its (n,2,3) Jacobian."""
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    zs = np.where(z > DEPTH_EPS, z, 1.0)
    uv = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=1)
    J = np.zeros((len(xc), 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * x / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * y / zs**2
    return uv, J


def ba2d_jac(K, R, t, X, pixel, Rp=None, tp=None):
    """Observed minus projected pixel.

    Blocks whose point is not in front of the camera are deactivated: their
    residual and Jacobian are zero and ``valid`` is False.
    """
    xc, Jp, Jx = transform_jac(R, t, X, Rp, tp)
    uv, Jproj = projection_jac(K, xc)
    valid = xc[:, 2] > DEPTH_EPS
    r = np.where(valid[:, None], pixel - uv, 0.0)
    Jpose = -(Jproj @ Jp) * valid[:, None, None]
    Jpoint = -(Jproj @ Jx) * valid[:, None, None]
    return r, Jpose, Jpoint, valid


def ba3d_jac(R, t, X, measured, Rp=None, tp=None):
    """Camera-frame measurement minus transformed point."""
    xc, Jp, Jx = transform_jac(R, t, X, Rp, tp)
    return measured - xc, -Jp, -Jx


def nc_jac(d, normal):
    """Dot product of a unit normal with the unit direction of displacement ``d``.

    Returns ``(r (n,), J_d (n,3), zero_mask)``; zero displacements give r = 0.
    """
    d = np.asarray(d, dtype=float).reshape(-1, 3)
    n = np.asarray(normal, dtype=float).reshape(3)
    norm = np.linalg.norm(d, axis=1)
    zero = norm <= 1e-12
    safe = np.where(zero, 1.0, norm)
    u = d / safe[:, None]
    r = np.where(zero, 0.0, u @ n)
    J = (n[None, :] - (u @ n)[:, None] * u) / safe[:, None]
    J[zero] = 0.0
    return r, J, zero


def tc1_jac(prev, cur):
    """(cur - prev) x cur, with Jacobians w.r.t. prev and cur."""
    prev = np.asarray(prev, dtype=float).reshape(-1, 3)
    cur = np.asarray(cur, dtype=float).reshape(-1, 3)
    r = np.cross(cur - prev, cur)
    # (c - p) x c = c x p
    return r, _skew_batch(cur), -_skew_batch(prev)


def tc2_jac(prev, cur, nxt):
    prev, cur, nxt = (np.asarray(a, dtype=float).reshape(-1, 3) for a in (prev, cur, nxt))
    return nxt - 2 * cur + prev


def bound_values(u, delta):
    return delta * np.tanh(u)


def bc_jac(Xi, Xj, u, delta):
    """X_i - X_j - delta * tanh(u); ``u`` is (n,3) or (n,1) (broadcast to all axes).

    A scalar bound is limited by the smallest component of ``delta``.

    Returns ``(r, dr/du (n,3,k))``; the point Jacobians are +I and -I.
    """
    Xi = np.asarray(Xi, dtype=float).reshape(-1, 3)
    Xj = np.asarray(Xj, dtype=float).reshape(-1, 3)
    u = np.asarray(u, dtype=float).reshape(len(Xi), -1)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (3,))
    k = u.shape[1]
    if k == 1:
        # a scalar bound shares the tightest axis limit
        delta = np.full(3, delta.min())
    th = np.tanh(u)
    r = Xi - Xj - delta * (th if k == 3 else np.repeat(th, 3, axis=1))
    sech2 = 1.0 - th**2
    if k == 3:
        Ju = -np.einsum("ij,nj->nij", np.eye(3), delta * sech2)
    else:
        Ju = -(delta[None, :, None] * sech2[:, None, :])
    return r, Ju


# single-instance forms


def residual_ba2d(pose: RigidMotion, point, pixel, K: CameraIntrinsics):
    r, _, _, _ = ba2d_jac(K, pose.rotation[None], pose.translation[None], np.reshape(point, (1, 3)),
                          np.reshape(pixel, (1, 2)))
    return r[0]


def residual_ba3d(pose: RigidMotion, point, measured):
    r, _, _ = ba3d_jac(pose.rotation[None], pose.translation[None], np.reshape(point, (1, 3)),
                       np.reshape(measured, (1, 3)))
    return r[0]


def residual_nc1(translation, normal):
    return float(nc_jac(translation, normal)[0][0])


def residual_nc2(translation, normals):
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(normals) < 1:
        raise ValueError("need at least one normal hypothesis")
    return float(np.mean([residual_nc1(translation, n) for n in normals]))


def residual_tc1(prev, cur):
    return tc1_jac(prev, cur)[0][0]


def residual_tc2(prev, cur, nxt):
    return tc2_jac(prev, cur, nxt)[0]


def residual_bc(variant, Xi, Xj, bound, delta, body_i=None, body_j=None):
    """Difference-minus-bound for one pair; ``bound`` is the clamped value itself."""
    if body_i != body_j:
        raise MismatchedBody(f"pair spans bodies {body_i} and {body_j}")
    if variant not in BC_VARIANTS:
        raise ValueError(f"unknown box variant {variant!r}")
    bound = np.asarray(bound, dtype=float)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (3,))
    expected = 3 if variant in ("BC1", "BC3") else 1
    if bound.size != expected:
        raise ValueError(f"{variant} takes a bound of size {expected}")
    if np.any(np.abs(bound) > (delta if expected == 3 else delta.min()) + 1e-12):
        raise ValueError("bound outside [-delta, delta]")
    return np.asarray(Xi, dtype=float) - np.asarray(Xj, dtype=float) - bound * np.ones(3)


def optimal_bound(variant, diff, delta):
    """Inner minimizer of the box residual over the bound for a single pair."""
    diff = np.asarray(diff, dtype=float)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (3,))
    if variant in ("BC1", "BC3"):
        return np.clip(diff, -delta, delta)
    d = delta.min()
    return float(np.clip(diff.mean(), -d, d))

