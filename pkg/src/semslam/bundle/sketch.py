"""Random row sketches for subsampling least-squares constraints."""
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from ..errors import BadDimensions

MODES = ("selection", "sign")


@dataclass
class Sketch:
    """A t x m operator: either a CountSketch (one +-1 per column) or a row selection."""

    mode: str
    n_rows: int
    n_sketch: int
    rows: np.ndarray
    signs: np.ndarray | None = None

    def matrix(self):
        m, t = self.n_rows, self.n_sketch
        if self.mode == "sign":
            return sparse.csr_matrix((self.signs, (self.rows, np.arange(m))), shape=(t, m))
        return sparse.csr_matrix((np.ones(t), (np.arange(t), self.rows)), shape=(t, m))

    def apply(self, A):
        A = np.asarray(A, dtype=float)
        if self.mode == "selection":
            return A[self.rows]
        return self.matrix() @ A


def build_sketch(n_rows, n_sketch, seed, mode="selection"):
    m, t = int(n_rows), int(n_sketch)
    if t < 1 or t > m:
        raise BadDimensions(f"sketch size {t} must lie in [1, {m}]")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    rng = np.random.default_rng(seed)
    if mode == "sign":
        return Sketch(mode, m, t, rng.integers(t, size=m), rng.choice([-1.0, 1.0], size=m))
    return Sketch(mode, m, t, np.sort(rng.choice(m, size=t, replace=False)))
