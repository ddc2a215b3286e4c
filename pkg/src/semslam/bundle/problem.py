"""Refinement problem container and its damped Gauss-Newton solver."""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu, spsolve

from .. import serialize
from ..errors import ConfigInvalid, MismatchedBody, NumericalFailure
from ..geometry import CameraIntrinsics, RigidMotion, so3_exp
from . import residuals as res

BA_FORMAT = "ba/1"
FAMILIES = ("ba2d", "ba3d", "nc", "tc", "bc")
NC_VARIANTS = ("NC1", "NC2")
TC_VARIANTS = ("TC1", "TC2")
_BOUND_SHAPE = {"BC1": (None, 3), "BC2": (None, 1), "BC3": (1, 3), "BC4": (1, 1)}


@dataclass
class Observations:
    """Stacked measurements: camera point = prefix o pose o point."""

    pose: np.ndarray
    point: np.ndarray
    value: np.ndarray
    prefix: np.ndarray | None = None

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=int).reshape(-1)
        self.point = np.asarray(self.point, dtype=int).reshape(-1)
        self.value = np.asarray(self.value, dtype=float).reshape(len(self.pose), -1)
        if self.prefix is None:
            self.prefix = np.full(len(self.pose), -1, dtype=int)
        self.prefix = np.asarray(self.prefix, dtype=int).reshape(-1)

    def __len__(self):
        return len(self.pose)

    @classmethod
    def empty(cls, dim):
        return cls(np.zeros(0, int), np.zeros(0, int), np.zeros((0, dim)))

    def to_dict(self):
        return {"pose": self.pose, "point": self.point, "value": self.value, "prefix": self.prefix}

    @classmethod
    def from_dict(cls, d, dim):
        n = len(d["pose"])
        return cls(d["pose"], d["point"], serialize.as_float_array(d["value"], (n, dim)), d["prefix"])


@dataclass
class SolverConfig:
    max_iters: int = 50
    grad_tol: float = 1e-10
    rel_tol: float = 1e-10
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    huber_2d: float | None = None
    huber_3d: float | None = None
    w_2d: float = 1.0
    w_3d: float = 1.0
    w_nc: float = 1.0
    w_tc: float = 1.0
    w_bc: float = 0.1
    delta: tuple = (2.4, 2.4, 2.4)

    def validate(self):
        for name, key in (("grad_tol", "gradTol"), ("rel_tol", "relTol"), ("damping_init", "dampingInit")):
            if not getattr(self, name) > 0:
                raise ConfigInvalid(key, "must be > 0")
        if self.damping_up <= 1 or not 0 < self.damping_down < 1:
            raise ConfigInvalid("dampingScale", "need up > 1 and 0 < down < 1")
        if int(self.max_iters) < 0:
            raise ConfigInvalid("maxIters", "must be >= 0")
        for name, key in (("w_2d", "w2d"), ("w_3d", "lambda"), ("w_nc", "wNC"), ("w_tc", "wTC"), ("w_bc", "wBC")):
            if not getattr(self, name) >= 0:
                raise ConfigInvalid(key, "weights must be >= 0")
        for name, key in (("huber_2d", "huber2d"), ("huber_3d", "huber3d")):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigInvalid(key, "must be > 0")
        d = np.asarray(self.delta, dtype=float)
        if d.shape != (3,) or np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ConfigInvalid("delta", "must be three finite values >= 0")
        return self

    _KEYS = {
        "maxIters": "max_iters", "gradTol": "grad_tol", "relTol": "rel_tol",
        "dampingInit": "damping_init", "dampingUp": "damping_up", "dampingDown": "damping_down",
        "huber2d": "huber_2d", "huber3d": "huber_3d", "w2d": "w_2d", "lambda": "w_3d",
        "wNC": "w_nc", "wTC": "w_tc", "wBC": "w_bc", "delta": "delta",
    }

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for k, v in d.items():
            if k not in cls._KEYS:
                raise ConfigInvalid(k, "unknown solver option")
            kw[cls._KEYS[k]] = tuple(float(x) for x in v) if k == "delta" else v
        return cls(**kw).validate()

    def to_dict(self):
        return {k: (list(getattr(self, v)) if k == "delta" else getattr(self, v)) for k, v in self._KEYS.items()}


@dataclass
class BAProblem:
    """Parameter blocks plus typed residual blocks.

    ``track`` lists pose indices in frame order; trajectory and normal terms
    act on their translations.  ``prefixes`` are held-fixed poses applied after
    a free pose (a camera seen from the world, for object blocks).
    """

    intrinsics: CameraIntrinsics
    poses: list
    points: np.ndarray
    gauge: int = 0
    point_body: np.ndarray | None = None
    prefixes: list = field(default_factory=list)
    obs2d: Observations = field(default_factory=lambda: Observations.empty(2))
    obs3d: Observations = field(default_factory=lambda: Observations.empty(3))
    track: list = field(default_factory=list)
    flagged: list = field(default_factory=list)
    nc_variant: str | None = None
    normals: np.ndarray | None = None
    tc_variant: str | None = None
    bc_variant: str | None = None
    pairs: np.ndarray | None = None
    bounds: np.ndarray | None = None
    pose_frames: list | None = None

    def __post_init__(self):
        self.points = np.array(self.points, dtype=float).reshape(-1, 3)
        if self.point_body is None:
            self.point_body = np.zeros(len(self.points), dtype=int)
        self.point_body = np.asarray(self.point_body, dtype=int)
        if self.pose_frames is None:
            self.pose_frames = list(range(len(self.poses)))
        self.validate()
        if self.bc_variant is not None and self.bounds is None:
            rows, k = _BOUND_SHAPE[self.bc_variant]
            self.bounds = np.zeros((len(self.pairs) if rows is None else rows, k))

    def validate(self):
        n_pose, n_pt = len(self.poses), len(self.points)
        if not 0 <= self.gauge < n_pose:
            raise ConfigInvalid("gauge", "gauge pose index out of range")
        for name, ob in (("obs2d", self.obs2d), ("obs3d", self.obs3d)):
            if len(ob) and (ob.pose.min() < 0 or ob.pose.max() >= n_pose
                            or ob.point.min() < 0 or ob.point.max() >= n_pt
                            or ob.prefix.max() >= len(self.prefixes)):
                raise ConfigInvalid(name, "observation references a missing block")
        if any(not 0 <= i < n_pose for i in self.track):
            raise ConfigInvalid("track", "track references a missing pose")
        if self.nc_variant is not None:
            if self.nc_variant not in NC_VARIANTS:
                raise ConfigInvalid("nc", f"unknown variant {self.nc_variant}")
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if self.nc_variant == "NC1" and len(self.normals) != 1:
                raise ConfigInvalid("nc", "NC1 takes a single normal")
        if self.tc_variant is not None and self.tc_variant not in TC_VARIANTS:
            raise ConfigInvalid("tc", f"unknown variant {self.tc_variant}")
        if self.bc_variant is not None:
            if self.bc_variant not in _BOUND_SHAPE:
                raise ConfigInvalid("bc", f"unknown variant {self.bc_variant}")
            self.pairs = np.asarray(self.pairs, dtype=int).reshape(-1, 2)
            if len(self.pairs) and (self.pairs.min() < 0 or self.pairs.max() >= n_pt):
                raise ConfigInvalid("bc", "pair references a missing point")
            if np.any(self.point_body[self.pairs[:, 0]] != self.point_body[self.pairs[:, 1]]):
                raise MismatchedBody("box pair spans two bodies")

    def copy(self):
        return copy.deepcopy(self)

    def to_dict(self):
        return {
            "format": BA_FORMAT,
            "intrinsics": self.intrinsics.to_dict(),
            "poses": [p.to_dict() for p in self.poses],
            "poseFrames": self.pose_frames,
            "points": self.points,
            "pointBody": self.point_body,
            "gauge": self.gauge,
            "prefixes": [p.to_dict() for p in self.prefixes],
            "obs2d": self.obs2d.to_dict(),
            "obs3d": self.obs3d.to_dict(),
            "track": self.track,
            "flagged": self.flagged,
            "nc": self.nc_variant,
            "normals": self.normals,
            "tc": self.tc_variant,
            "bc": self.bc_variant,
            "pairs": self.pairs,
            "bounds": self.bounds,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != BA_FORMAT:
            raise ConfigInvalid("format", f"expected {BA_FORMAT}")
        pts = serialize.as_float_array(d["points"], (-1, 3))
        bounds = None
        if d["bc"] is not None:
            k = _BOUND_SHAPE[d["bc"]][1]
            bounds = serialize.as_float_array(d["bounds"], (-1, k))
        return cls(
            CameraIntrinsics.from_dict(d["intrinsics"]),
            [RigidMotion.from_dict(p) for p in d["poses"]],
            pts,
            int(d["gauge"]),
            np.array(d["pointBody"], dtype=int),
            [RigidMotion.from_dict(p) for p in d["prefixes"]],
            Observations.from_dict(d["obs2d"], 2),
            Observations.from_dict(d["obs3d"], 3),
            [int(i) for i in d["track"]],
            [int(i) for i in d["flagged"]],
            d["nc"],
            None if d["normals"] is None else serialize.as_float_array(d["normals"], (-1, 3)),
            d["tc"],
            d["bc"],
            None if d["pairs"] is None else np.array(d["pairs"], dtype=int).reshape(-1, 2),
            bounds,
            [int(f) for f in d["poseFrames"]],
        )


def initial_bounds(problem: BAProblem, delta, limit=0.999):
    """Bound variables at the inner minimizer of the box terms for the current points.

    Pairs already inside the box then start with a zero residual.  Values are
    in the unclamped parameterization (bound = delta * tanh(u)).
    """
    rows, k = _BOUND_SHAPE[problem.bc_variant]
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (3,))
    d = problem.points[problem.pairs[:, 0]] - problem.points[problem.pairs[:, 1]]
    if rows is not None:
        d = d.mean(axis=0, keepdims=True)
    if k == 1:
        lim = delta.min()
        frac = d.mean(axis=1, keepdims=True) / lim if lim > 0 else np.zeros((len(d), 1))
    else:
        frac = np.divide(d, delta, out=np.zeros_like(d), where=delta > 0)
    return np.arctanh(np.clip(frac, -limit, limit))


# assembly


class _Layout:
    def __init__(self, problem: BAProblem, cfg: SolverConfig):
        self.pose_col = np.full(len(problem.poses), -1, dtype=int)
        free = [i for i in range(len(problem.poses)) if i != problem.gauge]
        self.pose_col[free] = 6 * np.arange(len(free))
        self.point0 = 6 * len(free)
        self.bound0 = self.point0 + 3 * len(problem.points)
        self.use_bc = problem.bc_variant is not None and cfg.w_bc > 0 and len(problem.pairs) > 0
        self.n = self.bound0 + (problem.bounds.size if self.use_bc else 0)


class _Builder:
    def __init__(self, want_jac=True):
        self.want_jac = want_jac
        self.rows, self.cols, self.vals = [], [], []
        self.r = []
        self.n_rows = 0
        self.slices = {}

    def add(self, name, r, blocks):
        """``blocks``: list of (cols (n,k), vals (n,d,k)); negative columns are dropped."""
        r = np.asarray(r, dtype=float)
        n, d = r.shape
        row = self.n_rows + np.arange(n * d).reshape(n, d)
        for cols, vals in blocks if self.want_jac else ():
            k = cols.shape[1]
            R = np.broadcast_to(row[:, :, None], (n, d, k))
            C = np.broadcast_to(cols[:, None, :], (n, d, k))
            if cols.size and cols.min() >= 0:
                self.rows.append(R.ravel())
                self.cols.append(C.ravel())
                self.vals.append(np.ravel(vals))
                continue
            keep = C >= 0
            self.rows.append(R[keep])
            self.cols.append(C[keep])
            self.vals.append(vals[keep])
        self.slices[name] = slice(self.n_rows, self.n_rows + n * d)
        self.r.append(r.reshape(-1))
        self.n_rows += n * d

    def finish(self, n_cols, want_jac):
        r = np.concatenate(self.r) if self.r else np.zeros(0)
        if not want_jac:
            return r, None
        if self.rows:
            rows, cols, vals = (np.concatenate(a) for a in (self.rows, self.cols, self.vals))
        else:
            rows = cols = np.zeros(0, int)
            vals = np.zeros(0)
        J = sparse.csr_matrix((vals, (rows, cols)), shape=(self.n_rows, n_cols))
        return r, J


def _pose_cols(layout, idx):
    base = layout.pose_col[idx]
    return np.where(base[:, None] >= 0, base[:, None] + np.arange(6), -1)


def _point_cols(layout, idx):
    return layout.point0 + 3 * idx[:, None] + np.arange(3)


def _trans_cols(layout, idx):
    base = layout.pose_col[np.asarray(idx, dtype=int)]
    return np.where(base[:, None] >= 0, base[:, None] + 3 + np.arange(3), -1)


def _huber_scale(r, thresh):
    """IRLS weights sqrt(w) per block and the robust cost per block."""
    s = np.linalg.norm(r, axis=1)
    if thresh is None:
        return np.ones(len(r)), s**2
    w = np.where(s <= thresh, 1.0, thresh / np.maximum(s, 1e-300))
    cost = np.where(s <= thresh, s**2, 2 * thresh * s - thresh**2)
    return np.sqrt(w), cost


def _stack_poses(poses, idx):
    idx = np.asarray(idx, dtype=int)
    R = np.array([p.rotation for p in poses]).reshape(-1, 3, 3)
    t = np.array([p.translation for p in poses]).reshape(-1, 3)
    return R[idx], t[idx]


def _prefix_arrays(problem, ob):
    if len(ob) == 0 or np.all(ob.prefix < 0):
        return None, None
    if np.any(ob.prefix < 0):
        # identity prefix where none is given
        eye = RigidMotion.identity()
        plist = [problem.prefixes[i] if i >= 0 else eye for i in ob.prefix]
        return (np.array([p.rotation for p in plist]), np.array([p.translation for p in plist]))
    return _stack_poses(problem.prefixes, ob.prefix)


def _trajectory_terms(problem: BAProblem):
    """Index triples for the normal and smoothness terms, skipping flagged poses."""
    track = list(problem.track)
    bad = set(problem.flagged)
    nc = [(a, b) for a, b in zip(track, track[1:]) if a not in bad and b not in bad]
    tc = []
    if problem.tc_variant == "TC1" and track and track[0] not in bad:
        tc = [(track[0], a, b) for a, b in zip(track, track[1:]) if a not in bad and b not in bad]
    elif problem.tc_variant == "TC2":
        tc = [t for t in zip(track, track[1:], track[2:]) if not bad.intersection(t)]
    return nc, tc


def evaluate(problem: BAProblem, cfg: SolverConfig, want_jac=True, layout=None):
    """Weighted residual vector, sparse Jacobian, per-family costs and flags."""
    layout = layout or _Layout(problem, cfg)
    b = _Builder(want_jac)
    costs = dict.fromkeys(FAMILIES, 0.0)
    flags = {"nonPositiveDepth": 0, "zeroTranslation": 0}
    P = problem.points

    ob = problem.obs2d
    if cfg.w_2d > 0 and len(ob):
        R, t = _stack_poses(problem.poses, ob.pose)
        Rp, tp = _prefix_arrays(problem, ob)
        r, Jp, Jx, valid = res.ba2d_jac(problem.intrinsics, R, t, P[ob.point], ob.value, Rp, tp)
        flags["nonPositiveDepth"] = int(np.sum(~valid))
        sw, c = _huber_scale(r, cfg.huber_2d)
        costs["ba2d"] = cfg.w_2d * float(c.sum())
        s = np.sqrt(cfg.w_2d) * sw
        b.add("ba2d", r * s[:, None], [(_pose_cols(layout, ob.pose), Jp * s[:, None, None]),
                                      (_point_cols(layout, ob.point), Jx * s[:, None, None])])

    ob = problem.obs3d
    if cfg.w_3d > 0 and len(ob):
        R, t = _stack_poses(problem.poses, ob.pose)
        Rp, tp = _prefix_arrays(problem, ob)
        r, Jp, Jx = res.ba3d_jac(R, t, P[ob.point], ob.value, Rp, tp)
        sw, c = _huber_scale(r, cfg.huber_3d)
        costs["ba3d"] = cfg.w_3d * float(c.sum())
        s = np.sqrt(cfg.w_3d) * sw
        b.add("ba3d", r * s[:, None], [(_pose_cols(layout, ob.pose), Jp * s[:, None, None]),
                                      (_point_cols(layout, ob.point), Jx * s[:, None, None])])

    nc_idx, tc_idx = _trajectory_terms(problem)
    trans = np.array([p.translation for p in problem.poses]).reshape(-1, 3)
    if problem.nc_variant is not None and cfg.w_nc > 0 and nc_idx:
        a, c_ = (np.array(x) for x in zip(*nc_idx))
        normal = problem.normals.mean(axis=0)
        r, Jd, zero = res.nc_jac(trans[c_] - trans[a], normal)
        flags["zeroTranslation"] = int(zero.sum())
        s = np.sqrt(cfg.w_nc)
        costs["nc"] = cfg.w_nc * float(np.sum(r**2))
        Jd = (s * Jd)[:, None, :]
        b.add("nc", s * r[:, None], [(_trans_cols(layout, c_), Jd), (_trans_cols(layout, a), -Jd)])

    if problem.tc_variant is not None and cfg.w_tc > 0 and tc_idx:
        i0, i1, i2 = (np.array(x) for x in zip(*tc_idx))
        s = np.sqrt(cfg.w_tc)
        eye = np.broadcast_to(np.eye(3), (len(i0), 3, 3))
        if problem.tc_variant == "TC1":
            # positions relative to the first tracked pose
            prev, cur = trans[i1] - trans[i0], trans[i2] - trans[i0]
            r, Jprev, Jcur = res.tc1_jac(prev, cur)
            blocks = [(_trans_cols(layout, i1), s * Jprev), (_trans_cols(layout, i2), s * Jcur),
                      (_trans_cols(layout, i0), -s * (Jprev + Jcur))]
        else:
            r = res.tc2_jac(trans[i0], trans[i1], trans[i2])
            blocks = [(_trans_cols(layout, i0), s * eye), (_trans_cols(layout, i1), -2 * s * eye),
                      (_trans_cols(layout, i2), s * eye)]
        costs["tc"] = cfg.w_tc * float(np.sum(r**2))
        b.add("tc", s * r, blocks)

    if layout.use_bc:
        pi, pj = problem.pairs[:, 0], problem.pairs[:, 1]
        npair = len(pi)
        k = problem.bounds.shape[1]
        if problem.bounds.shape[0] == npair:
            bidx = np.arange(npair)
        else:
            bidx = np.zeros(npair, dtype=int)
        u = problem.bounds[bidx]
        r, Ju = res.bc_jac(P[pi], P[pj], u, np.asarray(cfg.delta, dtype=float))
        s = np.sqrt(cfg.w_bc)
        costs["bc"] = cfg.w_bc * float(np.sum(r**2))
        eye = np.broadcast_to(np.eye(3), (npair, 3, 3))
        bcols = layout.bound0 + k * bidx[:, None] + np.arange(k)
        b.add("bc", s * r, [(_point_cols(layout, pi), s * eye), (_point_cols(layout, pj), -s * eye),
                            (bcols, s * Ju)])

    r, J = b.finish(layout.n, want_jac)
    return r, J, costs, flags, b.slices


def _check_finite(r, J, slices, problem):
    bad = ~np.isfinite(r)
    if J is not None and not np.all(np.isfinite(J.data)):
        coo = J.tocoo()
        bad[coo.row[~np.isfinite(coo.data)]] = True
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        for name, sl in slices.items():
            if sl.start <= row < sl.stop:
                dim = {"ba2d": 2, "nc": 1}.get(name, 3)
                raise NumericalFailure(f"{name}[{(row - sl.start) // dim}]")
        raise NumericalFailure("unknown")


def apply_step(problem: BAProblem, layout: _Layout, delta):
    out = problem.copy()
    for i, c in enumerate(layout.pose_col):
        if c < 0:
            continue
        w, v = delta[c:c + 3], delta[c + 3:c + 6]
        p = problem.poses[i]
        out.poses[i] = RigidMotion(so3_exp(w) @ p.rotation, p.translation + v)
    out.points = problem.points + delta[layout.point0:layout.bound0].reshape(-1, 3)
    if layout.use_bc:
        out.bounds = problem.bounds + delta[layout.bound0:].reshape(problem.bounds.shape)
    return out


@dataclass
class SolveReport:
    iterations: list
    status: str
    initial_cost: float
    final_cost: float
    flags: dict

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "status": self.status,
            "initialCost": self.initial_cost,
            "finalCost": self.final_cost,
            "flags": self.flags,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["iterations"], d["status"], d["initialCost"], d["finalCost"], d["flags"])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "total", *FAMILIES])
            for it in self.iterations:
                w.writerow([it["iter"]] + [serialize.format_float(float(it[k])) for k in ("total", *FAMILIES)])


def total_cost(problem: BAProblem, cfg: SolverConfig):
    _, _, costs, _, _ = evaluate(problem, cfg, want_jac=False)
    return sum(costs.values()), costs


def _sparse_schur(A, g, p0):
    """Pose-block Schur complement with a sparse LU of the point and bound block.

    Box pairs couple points, so that block is sparse rather than block-diagonal;
    keeping the few dense pose columns out of the factorization avoids fill-in.
    """
    A = A.tocsc()
    Hpp = A[:p0, :p0].toarray()
    Hpl = A[:p0, p0:].toarray()
    try:
        lu = splu(A[p0:, p0:].tocsc(), permc_spec="MMD_AT_PLUS_A")
    except RuntimeError:
        return spsolve(A, -g)
    gp, gl = -g[:p0], -g[p0:]
    Y = lu.solve(np.ascontiguousarray(Hpl.T))
    z = lu.solve(gl)
    try:
        xp = np.linalg.solve(Hpp - Hpl @ Y, gp - Hpl @ z)
    except np.linalg.LinAlgError:
        return spsolve(A, -g)
    return np.concatenate([xp, z - Y @ xp])


def _damped_solve(H, g, mu, layout):
    """Solve (H + mu diag(H)) x = -g.

    Without box parameters the point blocks of H are 3x3 block-diagonal and
    are eliminated first (Schur complement on the pose block); with them the
    point and bound block is factorized as a sparse matrix instead.
    """
    diag = H.diagonal()
    A = H + sparse.diags(mu * diag + 1e-12, format="csc")
    p0, n_pt = layout.point0, layout.bound0 - layout.point0
    if n_pt == 0 or p0 == 0:
        return spsolve(A, -g)
    if layout.use_bc:
        return _sparse_schur(A, g, p0)
    A = A.tocsr()
    Hpp = A[:p0, :p0].toarray()
    Hpl = A[:p0, p0:].toarray()
    Hll = A[p0:, p0:].tobsr(blocksize=(3, 3))
    m = n_pt // 3
    if len(Hll.data) != m or not np.array_equal(Hll.indices, np.arange(m)):
        return spsolve(A.tocsc(), -g)
    try:
        inv_blocks = np.linalg.inv(Hll.data)
    except np.linalg.LinAlgError:
        return spsolve(A.tocsc(), -g)
    Linv = sparse.bsr_matrix((inv_blocks, np.arange(m), np.arange(m + 1)), shape=(n_pt, n_pt)).tocsr()
    gp, gl = -g[:p0], -g[p0:]
    W = (Linv.T @ Hpl.T).T
    S = Hpp - W @ Hpl.T
    try:
        xp = np.linalg.solve(S, gp - W @ gl)
    except np.linalg.LinAlgError:
        return spsolve(A.tocsc(), -g)
    xl = Linv @ (gl - Hpl.T @ xp)
    return np.concatenate([xp, xl])


def solve(problem: BAProblem, cfg: SolverConfig | None = None, callback=None):
    """Damped Gauss-Newton; returns ``(refined_problem, SolveReport)``.

    A step is kept only if it lowers the total objective, so the returned
    cost never exceeds the initial one.
    """
    cfg = (cfg or SolverConfig()).validate()
    layout = _Layout(problem, cfg)
    cur = problem.copy()
    r, J, costs, flags, slices = evaluate(cur, cfg, True, layout)
    _check_finite(r, J, slices, cur)
    cost = sum(costs.values())
    initial = cost
    history = [{"iter": 0, "total": cost, **costs, "damping": cfg.damping_init, "accepted": True}]
    mu = cfg.damping_init
    status = "maxIters"
    n = layout.n
    for it in range(1, int(cfg.max_iters) + 1):
        g = J.T @ r
        if n == 0 or np.max(np.abs(g)) < cfg.grad_tol:
            status = "gradientTolerance"
            break
        H = (J.T @ J).tocsc()
        accepted = False
        while mu < 1e16:
            step = _damped_solve(H, g, mu, layout)
            if not np.all(np.isfinite(step)):
                raise NumericalFailure("solver", "non-finite step")
            cand = apply_step(cur, layout, step)
            r2, _, costs2, flags2, slices2 = evaluate(cand, cfg, False, layout)
            new_cost = sum(costs2.values())
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                break
            mu *= cfg.damping_up
        if not accepted:
            status = "noDescent"
            break
        mu = max(mu * cfg.damping_down, 1e-15)
        rel = (cost - new_cost) / max(cost, 1e-300)
        cur, cost = cand, new_cost
        r, J, costs, flags, slices = evaluate(cur, cfg, True, layout)
        _check_finite(r, J, slices, cur)
        history.append({"iter": it, "total": cost, **costs, "damping": mu, "accepted": True})
        if callback is not None:
            callback(history[-1])
        if rel < cfg.rel_tol:
            status = "relativeTolerance"
            break
    return cur, SolveReport(history, status, initial, cost, flags)


def save_snapshot(path, problem: BAProblem, report: SolveReport | None = None, config: SolverConfig | None = None):
    d = {"format": BA_FORMAT, "problem": problem.to_dict()}
    if report is not None:
        d["report"] = report.to_dict()
    if config is not None:
        d["solver"] = config.to_dict()
    serialize.dump(d, path)


def load_snapshot(path):
    d = serialize.load(path)
    if d.get("format") != BA_FORMAT:
        raise ConfigInvalid("format", f"expected {BA_FORMAT}")
    report = SolveReport.from_dict(d["report"]) if "report" in d else None
    cfg = SolverConfig.from_dict(d["solver"]) if "solver" in d else None
    return BAProblem.from_dict(d["problem"]), report, cfg
