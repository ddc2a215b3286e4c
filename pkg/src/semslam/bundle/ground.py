"""Ground-plane normal estimation from ground-labelled points."""
import numpy as np

from ..errors import DegenerateConfiguration

METHODS = ("lsq", "ransacTopM")


def _plane_fit(P):
    c = P.mean(axis=0)
    _, s, Vt = np.linalg.svd(P - c, full_matrices=False)
    if len(s) < 2 or s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateConfiguration("ground points are collinear")
    return Vt[-1], c


def _canonical(n, reference):
    n = n / np.linalg.norm(n)
    return -n if n @ reference < 0 else n


def fit_ground_normal(points, method="lsq", seed=0, m=3, inlier_thresh=0.1, max_iters=200,
                      reference=(0.0, 0.0, 1.0)):
    """Unit normal(s) of the ground plane, oriented into the ``reference`` hemisphere.

    ``lsq`` returns a (3,) total-least-squares normal.  ``ransacTopM``
    returns an (m, 3) array: the m best-supported distinct hypotheses, each
    refit on its own inliers, best first.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    P = P[np.all(np.isfinite(P), axis=1)]
    ref = np.asarray(reference, dtype=float)
    if len(P) < 3:
        raise DegenerateConfiguration(f"need 3 ground points, got {len(P)}")
    if method == "lsq":
        n, _ = _plane_fit(P)
        return _canonical(n, ref)
    if method != "ransacTopM":
        raise ValueError(f"method must be one of {METHODS}")
    _plane_fit(P)  # rejects globally degenerate input
    rng = np.random.default_rng(seed)
    hyps = []
    for _ in range(max_iters):
        idx = rng.choice(len(P), size=3, replace=False)
        a, b, c = P[idx]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n /= norm
        inl = np.abs((P - a) @ n) < inlier_thresh
        hyps.append((int(inl.sum()), tuple(np.flatnonzero(inl))))
    if not hyps:
        raise DegenerateConfiguration("no valid plane hypothesis")
    out = []
    seen = set()
    for count, inl in sorted(hyps, key=lambda h: -h[0]):
        if inl in seen or count < 3:
            continue
        seen.add(inl)
        try:
            n, _ = _plane_fit(P[list(inl)])
        except DegenerateConfiguration:
            continue
        out.append(_canonical(n, ref))
        if len(out) == m:
            break
    while len(out) < m:
        out.append(out[-1])
    return np.array(out)
