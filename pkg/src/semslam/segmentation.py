"""Joint object-class / motion labelling with a two-layer dense CRF.

Each raster cell carries an object label ``x`` and a motion label ``y``
(0 = static, 1 = moving).  The energy is

    sum_i [psiO_i(x_i) + psiM_i(y_i) + lam(x_i, y_i)]
      + sum_{i<j, j in N(i)} [x_i != x_j] p(i, j) + [y_i != y_j] g(i, j)

where N(i) is a truncated disc neighbourhood.  Every unordered neighbour pair
contributes once.  Inference is mean-field with a distribution factorised
per cell into an object marginal and a motion marginal, updated
synchronously.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, SingularCovariance
from .geometry import CameraIntrinsics, RigidMotion, predicted_flow
from .scene import FrameObservation, raster_cells

MOTION_CLASSES = ("static", "moving")
STATIC, MOVING = 0, 1


@dataclass(frozen=True)
class LabelSpace:
    object_classes: tuple
    motion_classes: tuple = MOTION_CLASSES

    def __post_init__(self):
        if len(self.object_classes) < 2:
            raise ValueError("need at least two object classes")
        if len(self.motion_classes) != 2:
            raise ValueError("motion classes must be exactly two")

    def index(self, name):
        return self.object_classes.index(name)


class CompatibilityMatrix:
    """Object/motion compatibility costs, one row per object class."""

    def __init__(self, values):
        values = np.array(values, dtype=float)
        if values.ndim != 2 or values.shape[1] != 2:
            raise ShapeMismatch("compatibility matrix must be (n_classes, 2)")
        if np.any(values < -1.0) or np.any(values > 1.0):
            raise ValueError("compatibility entries must lie in [-1, 1]")
        self.values = values

    @classmethod
    def zeros(cls, n_classes):
        return cls(np.zeros((n_classes, 2)))

    @classmethod
    def from_mapping(cls, classes, mapping):
        """``mapping``: class name -> [static_cost, moving_cost]; missing classes get 0."""
        return cls([mapping.get(name, [0.0, 0.0]) for name in classes])


DEFAULT_COMPATIBILITY = {
    "road": [-0.5, 1.0],
    "car": [0.0, -0.5],
    "vegetation": [-0.5, 1.0],
    "sky": [-0.5, 1.0],
}


@dataclass
class UnaryField:
    object_unary: np.ndarray  # (H, W, L)
    motion_unary: np.ndarray  # (H, W, 2)

    def __post_init__(self):
        self.object_unary = np.asarray(self.object_unary, dtype=float)
        self.motion_unary = np.asarray(self.motion_unary, dtype=float)
        if self.object_unary.shape[:2] != self.motion_unary.shape[:2]:
            raise ShapeMismatch("object and motion unaries differ in raster shape")
        if self.motion_unary.shape[-1] != 2:
            raise ShapeMismatch("motion unary must have two labels")
        if not (np.all(np.isfinite(self.object_unary)) and np.all(np.isfinite(self.motion_unary))):
            raise ValueError("unaries must be finite")

    @property
    def shape(self):
        return self.object_unary.shape[:2]


@dataclass
class MarginalFields:
    q_object: np.ndarray
    q_motion: np.ndarray
    iterations: int = 0

    def is_normalized(self, tol=1e-9):
        return bool(
            np.all(self.q_object >= 0)
            and np.all(self.q_motion >= 0)
            and np.all(np.abs(self.q_object.sum(-1) - 1) <= tol)
            and np.all(np.abs(self.q_motion.sum(-1) - 1) <= tol)
        )


@dataclass
class JointLabeling:
    object_labels: np.ndarray
    motion_labels: np.ndarray


@dataclass(frozen=True)
class PairwiseParams:
    """Kernel weights and widths; distances are in raster cells."""

    w_smooth: float = 0.5
    theta_gamma: float = 1.5
    w_appearance: float = 0.5
    theta_alpha: float = 3.0
    theta_beta: float = 1.0
    w_motion: float = 1.0
    theta_flow: float = 2.0
    radius: float = 5.0

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})


# --- unaries ----------------------------------------------------------------


def default_flow_covariance(sigma_flow=1.0, sigma_pred=1.0):
    return (sigma_flow**2 + sigma_pred**2) * np.eye(2)


def check_covariance(cov):
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2) or np.max(np.abs(cov - cov.T)) > 1e-12:
        raise SingularCovariance("covariance must be a symmetric 2x2 matrix")
    if np.min(np.linalg.eigvalsh(cov)) <= 0:
        raise SingularCovariance("covariance is not positive definite")
    return cov


def mahalanobis_sq(residual, cov):
    cov = check_covariance(cov)
    residual = np.asarray(residual, dtype=float)
    sol = np.linalg.solve(cov, residual.reshape(-1, 2).T).T
    return np.sum(residual.reshape(-1, 2) * sol, axis=1).reshape(residual.shape[:-1])


def feature_static_costs(frame: FrameObservation, cam_motion: RigidMotion, K: CameraIntrinsics, cov):
    """Per-feature squared Mahalanobis distance between predicted and measured flow.

    NaN where the feature has no depth or no flow.
    """
    cov = check_covariance(cov)
    cost = np.full(len(frame), np.nan)
    ok = np.isfinite(frame.depths) & np.all(np.isfinite(frame.flows), axis=1) & (frame.depths > 0)
    if ok.any():
        pred = predicted_flow(K, cam_motion, frame.pixels[ok], frame.depths[ok])
        measured = frame.pixels[ok] + frame.flows[ok]
        cost[ok] = mahalanobis_sq(pred - measured, cov)
    return cost


def representative_features(frame: FrameObservation, image_size, raster_size):
    """Index of the nearest (smallest depth) feature in each raster cell, -1 if empty."""
    W, H = raster_size
    rows, cols, inside = raster_cells(frame.pixels, image_size, raster_size)
    rep = np.full((H, W), -1, dtype=int)
    depth = np.where(np.isfinite(frame.depths), frame.depths, np.inf)
    idx = np.flatnonzero(inside)
    order = idx[np.argsort(-depth[idx], kind="stable")]
    rep[rows[order], cols[order]] = order
    return rep


def motion_unary(
    frame: FrameObservation,
    cam_motion: RigidMotion,
    K: CameraIntrinsics,
    cov,
    image_size,
    raster_size,
    tau=4.0,
):
    """Per-cell (static, moving) costs from the cell's representative feature.

    The static cost is the flow Mahalanobis term, the moving cost the
    constant ``tau``.  Cells without a usable feature get (0, 0).
    """
    cost = feature_static_costs(frame, cam_motion, K, cov)
    rep = representative_features(frame, image_size, raster_size)
    out = np.zeros(rep.shape + (2,))
    has = rep >= 0
    c = np.full(rep.shape, np.nan)
    c[has] = cost[rep[has]]
    informative = np.isfinite(c)
    out[informative, STATIC] = c[informative]
    out[informative, MOVING] = tau
    return out


def raster_features(frame: FrameObservation, image_size, raster_size):
    """Per-cell appearance (measured depth) and flow of the representative feature."""
    rep = representative_features(frame, image_size, raster_size)
    app = np.full(rep.shape, np.nan)
    flow = np.full(rep.shape + (2,), np.nan)
    has = rep >= 0
    app[has] = frame.depths[rep[has]]
    flow[has] = frame.flows[rep[has]]
    return app, flow


def joint_unary(u: UnaryField, compat: CompatibilityMatrix):
    """Product-space cost (H, W, L, 2)."""
    L = u.object_unary.shape[-1]
    if compat.values.shape != (L, 2):
        raise ShapeMismatch(f"compatibility {compat.values.shape} vs {L} object classes")
    return u.object_unary[..., :, None] + u.motion_unary[..., None, :] + compat.values


# --- pairwise ----------------------------------------------------------------


def object_kernel(pos_i, pos_j, params: PairwiseParams, app_i=None, app_j=None):
    """Contrast-sensitive Potts weight p(i, j): smoothness plus appearance kernel."""
    d2 = float(np.sum((np.asarray(pos_i, float) - np.asarray(pos_j, float)) ** 2))
    k = params.w_smooth * np.exp(-d2 / (2 * params.theta_gamma**2))
    if app_i is not None and app_j is not None and np.all(np.isfinite([app_i, app_j])):
        a2 = float(np.sum((np.asarray(app_i, float) - np.asarray(app_j, float)) ** 2))
        k += params.w_appearance * np.exp(
            -d2 / (2 * params.theta_alpha**2) - a2 / (2 * params.theta_beta**2)
        )
    return k


def pairwise_object(label_i, label_j, pos_i, pos_j, params: PairwiseParams, app_i=None, app_j=None):
    if label_i == label_j:
        return 0.0
    return object_kernel(pos_i, pos_j, params, app_i, app_j)


def motion_kernel(flow_i, flow_j, params: PairwiseParams):
    d = float(np.linalg.norm(np.asarray(flow_i, float) - np.asarray(flow_j, float)))
    return params.w_motion * np.exp(-d / params.theta_flow)


def pairwise_motion(label_i, label_j, flow_i, flow_j, params: PairwiseParams):
    """Zero for agreeing labels, otherwise larger the more similar the two flows are."""
    if label_i == label_j:
        return 0.0
    return motion_kernel(flow_i, flow_j, params)


def neighbour_offsets(radius):
    r = int(np.floor(radius))
    offs = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if (dy, dx) != (0, 0) and dy * dy + dx * dx <= radius * radius:
                offs.append((dy, dx))
    return offs


def _shift(a, dy, dx, fill):
    """out[y, x] = a[y + dy, x + dx], ``fill`` outside."""
    H, W = a.shape[:2]
    out = np.full_like(a, fill)
    if abs(dy) >= H or abs(dx) >= W:
        return out
    ys = slice(max(0, -dy), min(H, H - dy))
    xs = slice(max(0, -dx), min(W, W - dx))
    ys_src = slice(max(0, dy), min(H, H + dy))
    xs_src = slice(max(0, dx), min(W, W + dx))
    out[ys, xs] = a[ys_src, xs_src]
    return out


class PairwiseGraph:
    """Precomputed per-offset kernel weights on a raster.

    ``obj[o][y, x]`` is p between cell (y, x) and cell (y+dy, x+dx); zero
    where the neighbour is outside the raster.
    """

    def __init__(self, shape, params: PairwiseParams, appearance=None, flow=None):
        H, W = shape
        self.shape = shape
        self.offsets = neighbour_offsets(params.radius)
        self.obj = []
        self.mot = []
        inside_ones = np.ones((H, W))
        for dy, dx in self.offsets:
            valid = _shift(inside_ones, dy, dx, 0.0)
            d2 = dy * dy + dx * dx
            k = params.w_smooth * np.exp(-d2 / (2 * params.theta_gamma**2)) * valid
            if appearance is not None and params.w_appearance != 0:
                other = _shift(appearance, dy, dx, np.nan)
                a2 = (appearance - other) ** 2
                ka = params.w_appearance * np.exp(-d2 / (2 * params.theta_alpha**2) - a2 / (2 * params.theta_beta**2))
                k = k + np.where(np.isfinite(ka), ka, 0.0) * valid
            self.obj.append(k)
            if flow is not None and params.w_motion != 0:
                other = _shift(flow, dy, dx, np.nan)
                d = np.linalg.norm(flow - other, axis=-1)
                km = params.w_motion * np.exp(-d / params.theta_flow)
                self.mot.append(np.where(np.isfinite(km), km, 0.0) * valid)
            else:
                self.mot.append(np.zeros((H, W)))

    def expected_disagreement(self, weights, q):
        """sum_j w_ij (1 - q_j(label)) for every cell and label."""
        H, W = self.shape
        r = max([max(abs(dy), abs(dx)) for dy, dx in self.offsets], default=0)
        qp = np.pad(1.0 - q, ((r, r), (r, r), (0, 0)))
        out = np.zeros_like(q)
        for (dy, dx), w in zip(self.offsets, weights):
            out += w[..., None] * qp[r + dy:r + dy + H, r + dx:r + dx + W]
        return out

    def edge_cost(self, weights, labels):
        """Sum over unordered pairs of w_ij [labels differ]."""
        total = 0.0
        for (dy, dx), w in zip(self.offsets, weights):
            if (dy, dx) < (0, 0):
                continue  # each unordered pair once
            other = _shift(labels, dy, dx, -1)
            total += float(np.sum(w * ((labels != other) & (other >= 0))))
        return total


def _softmax_neg(cost):
    z = -(cost - cost.min(axis=-1, keepdims=True))
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mean_field_infer(
    unary: UnaryField,
    compat: CompatibilityMatrix,
    params: PairwiseParams,
    appearance=None,
    flow=None,
    max_iters=10,
    tol=1e-4,
    callback=None,
    graph=None,
) -> MarginalFields:
    """Synchronous two-layer mean-field updates.

    Starts from the per-cell softmax of the negated unaries and stops when the
    largest per-cell total-variation change of either layer drops below
    ``tol`` or after ``max_iters`` iterations.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    lam = compat.values
    if lam.shape != (unary.object_unary.shape[-1], 2):
        raise ShapeMismatch("compatibility matrix does not match object classes")
    if graph is None:
        graph = PairwiseGraph(unary.shape, params, appearance, flow)
    qo = _softmax_neg(unary.object_unary)
    qm = _softmax_neg(unary.motion_unary)
    it = 0
    for it in range(1, max_iters + 1):
        cost_o = unary.object_unary + qm @ lam.T + graph.expected_disagreement(graph.obj, qo)
        cost_m = unary.motion_unary + qo @ lam + graph.expected_disagreement(graph.mot, qm)
        new_o = _softmax_neg(cost_o)
        new_m = _softmax_neg(cost_m)
        change = max(
            0.5 * np.abs(new_o - qo).sum(-1).max(),
            0.5 * np.abs(new_m - qm).sum(-1).max(),
        )
        qo, qm = new_o, new_m
        if callback is not None:
            callback(it, MarginalFields(qo, qm, it))
        if change < tol:
            break
    return MarginalFields(qo, qm, it)


def decode(m: MarginalFields) -> JointLabeling:
    """Per-cell argmax; ties go to the lowest class index."""
    return JointLabeling(np.argmax(m.q_object, axis=-1), np.argmax(m.q_motion, axis=-1))


def energy(
    labeling: JointLabeling,
    unary: UnaryField,
    compat: CompatibilityMatrix,
    params: PairwiseParams,
    appearance=None,
    flow=None,
    graph=None,
):
    x = np.asarray(labeling.object_labels)
    y = np.asarray(labeling.motion_labels)
    ju = joint_unary(unary, compat)
    H, W = x.shape
    rows, cols = np.indices((H, W))
    e = float(ju[rows, cols, x, y].sum())
    if graph is None:
        graph = PairwiseGraph(unary.shape, params, appearance, flow)
    e += graph.edge_cost(graph.obj, x)
    e += graph.edge_cost(graph.mot, y)
    return e


# --- serialisation / rendering ------------------------------------------------

LABELS_FORMAT = "labels/1"

# RGB per object class in label-space order; moving cells are blended halfway to red
PALETTE = {
    "road": (128, 64, 128),
    "car": (0, 0, 142),
    "vegetation": (107, 142, 35),
    "sky": (70, 130, 180),
}
FALLBACK_COLOR = (200, 200, 200)


def labeling_to_dict(frame, labeling: JointLabeling, marginals: MarginalFields | None = None):
    d = {
        "frame": frame,
        "objectLabels": np.asarray(labeling.object_labels),
        "motionLabels": np.asarray(labeling.motion_labels),
    }
    if marginals is not None:
        d["qObject"] = marginals.q_object
        d["qMotion"] = marginals.q_motion
    return d


def labeling_from_dict(d):
    lab = JointLabeling(np.array(d["objectLabels"], dtype=int), np.array(d["motionLabels"], dtype=int))
    marg = None
    if "qObject" in d:
        marg = MarginalFields(np.array(d["qObject"], dtype=float), np.array(d["qMotion"], dtype=float))
    return lab, marg


def render_ppm(labeling: JointLabeling, class_names) -> bytes:
    x = np.asarray(labeling.object_labels)
    y = np.asarray(labeling.motion_labels)
    colors = np.array([PALETTE.get(n, FALLBACK_COLOR) for n in class_names], dtype=np.int64)
    rgb = colors[x]
    red = np.array([255, 0, 0], dtype=np.int64)
    rgb = np.where(y[..., None] == MOVING, (rgb + red) // 2, rgb).astype(np.uint8)
    H, W = x.shape
    return b"P6\n%d %d\n255\n" % (W, H) + rgb.tobytes()
