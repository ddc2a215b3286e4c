"""Central finite-difference checks of the analytic residual Jacobians.

Each checker draws one seeded evaluation point, perturbs every parameter by
+-h (scaled to the parameter's magnitude) and returns the relative error
||J_analytic - J_fd|| / ||J_fd||.
"""
import numpy as np

from semslam.bundle import residuals as res
from semslam.geometry import CameraIntrinsics, random_rotation, so3_exp

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
H = 1e-6


def _rel(Ja, Jf):
    denom = max(np.linalg.norm(Jf), 1e-12)
    return float(np.linalg.norm(Ja - Jf) / denom)


def _fd(fun, x, scale):
    """Central differences of vector-valued ``fun`` at flat ``x``."""
    cols = []
    for i in range(len(x)):
        h = H * max(1.0, abs(scale[i]))
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _pose(rng):
    return random_rotation(rng), rng.normal(size=3)


def _in_front(rng, R, t, Rp=None, tp=None):
    """A world point that lands 3-10 units in front of the (composed) camera."""
    xc = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(3, 10)])
    if Rp is not None:
        xc = Rp.T @ (xc - tp)
    return R.T @ (xc - t)


def _pose_point_fd(f, R, t, X):
    """FD w.r.t. the (w, v) pose update and the point, stacked as 9 columns."""
    x0 = np.concatenate([np.zeros(6), X])

    def fun(x):
        return f(so3_exp(x[:3]) @ R, t + x[3:6], x[6:])

    return _fd(fun, x0, np.concatenate([np.ones(3), t, X]))


def check_ba2d(seed):
    rng = np.random.default_rng(seed)
    R, t = _pose(rng)
    prefixed = seed % 2 == 1
    Rp, tp = _pose(rng) if prefixed else (None, None)
    X = _in_front(rng, R, t, Rp, tp)
    px = rng.normal(size=2) * 5 + [320, 240]

    def f(R_, t_, X_):
        a = (Rp[None], tp[None]) if prefixed else (None, None)
        return res.ba2d_jac(K, R_[None], t_[None], X_[None], px[None], *a)[0][0]

    a = (Rp[None], tp[None]) if prefixed else (None, None)
    _, Jp, Jx, valid = res.ba2d_jac(K, R[None], t[None], X[None], px[None], *a)
    assert valid[0]
    return _rel(np.concatenate([Jp[0], Jx[0]], axis=1), _pose_point_fd(f, R, t, X))


def check_ba3d(seed):
    rng = np.random.default_rng(seed)
    R, t = _pose(rng)
    prefixed = seed % 2 == 1
    Rp, tp = _pose(rng) if prefixed else (None, None)
    X = rng.normal(size=3) * 3
    m = rng.normal(size=3) * 3
    a = (Rp[None], tp[None]) if prefixed else (None, None)

    def f(R_, t_, X_):
        return res.ba3d_jac(R_[None], t_[None], X_[None], m[None], *a)[0][0]

    _, Jp, Jx = res.ba3d_jac(R[None], t[None], X[None], m[None], *a)
    return _rel(np.concatenate([Jp[0], Jx[0]], axis=1), _pose_point_fd(f, R, t, X))


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def check_nc1(seed):
    rng = np.random.default_rng(seed)
    n = _unit(rng)
    d = rng.normal(size=3) * rng.uniform(0.5, 3)
    _, J, _ = res.nc_jac(d, n)
    Jf = _fd(lambda x: np.array([res.residual_nc1(x, n)]), d, d)
    return _rel(J, Jf)


def check_nc2(seed):
    rng = np.random.default_rng(seed)
    normals = np.array([_unit(rng) for _ in range(1 + seed % 4)])
    d = rng.normal(size=3) * rng.uniform(0.5, 3)
    _, J, _ = res.nc_jac(d, normals.mean(axis=0))
    Jf = _fd(lambda x: np.array([res.residual_nc2(x, normals)]), d, d)
    return _rel(J, Jf)


def check_tc1(seed):
    rng = np.random.default_rng(seed)
    p, c = rng.normal(size=(2, 3)) * 3
    _, Jp, Jc = res.tc1_jac(p, c)
    x0 = np.concatenate([p, c])
    Jf = _fd(lambda x: res.residual_tc1(x[:3], x[3:]), x0, x0)
    return _rel(np.concatenate([Jp[0], Jc[0]], axis=1), Jf)


def check_tc2(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=9) * 3
    J = np.concatenate([np.eye(3), -2 * np.eye(3), np.eye(3)], axis=1)
    Jf = _fd(lambda x: res.residual_tc2(x[:3], x[3:6], x[6:]), x0, x0)
    return _rel(J, Jf)


def check_bc(seed):
    rng = np.random.default_rng(seed)
    variant = res.BC_VARIANTS[seed % 4]
    k = 3 if variant in ("BC1", "BC3") else 1
    Xi, Xj = rng.normal(size=(2, 3)) * 2
    u = rng.normal(size=k)
    delta = rng.uniform(0.5, 3, size=3)
    _, Ju = res.bc_jac(Xi, Xj, u[None], delta)
    Ja = np.concatenate([np.eye(3), -np.eye(3), Ju[0]], axis=1)
    x0 = np.concatenate([Xi, Xj, u])

    def fun(x):
        return res.bc_jac(x[:3], x[3:6], x[6:][None], delta)[0][0]

    return _rel(Ja, _fd(fun, x0, x0))


CHECKS = {
    "ba2d": check_ba2d,
    "ba3d": check_ba3d,
    "nc1": check_nc1,
    "nc2": check_nc2,
    "tc1": check_tc1,
    "tc2": check_tc2,
    "bc": check_bc,
}


def worst_error(family, n_points=100, seed0=0):
    return max(CHECKS[family](seed0 + s) for s in range(n_points))
