"""Selection of point pairs for box constraints."""
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigInvalid, NotEnoughPairs

STRATEGIES = ("Strat1", "Strat2", "Strat3")


@dataclass(frozen=True)
class SamplingPlan:
    strategy: str = "Strat3"
    n_constraints: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigInvalid("strategy", f"must be one of {STRATEGIES}")
        if int(self.n_constraints) < 1:
            raise ConfigInvalid("nConstraints", "must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("strategy", "Strat3"), int(d.get("nConstraints", 1000)), int(d.get("seed", 0)))

    def to_dict(self):
        return {"strategy": self.strategy, "nConstraints": self.n_constraints, "seed": self.seed}


def _key(i, j):
    return (i, j) if i < j else (j, i)


def _strat1(n, t, rng):
    total = n * (n - 1) // 2
    if t * 4 > total:
        # dense regime: draw directly from the enumerated pair list
        i, j = np.triu_indices(n, k=1)
        pick = rng.choice(total, size=t, replace=False)
        return [(int(a), int(b)) for a, b in zip(i[pick], j[pick])]
    seen = set()
    out = []
    while len(out) < t:
        a, b = rng.integers(n, size=2)
        if a == b:
            continue
        k = _key(int(a), int(b))
        if k not in seen:
            seen.add(k)
            out.append(k)
    return out


def _far_order(points, anchor):
    d = np.sum((points - points[anchor]) ** 2, axis=1)
    # descending distance, ties broken by lowest index
    return np.lexsort((np.arange(len(points)), -d))


def _strat2(points, t, rng):
    n = len(points)
    seen = set()
    out = []
    anchors = rng.permutation(n)
    cursor = 0
    while len(out) < t:
        if cursor == len(anchors):
            anchors = rng.permutation(n)
            cursor = 0
        a = int(anchors[cursor])
        cursor += 1
        for b in _far_order(points, a):
            b = int(b)
            if b == a:
                continue
            k = _key(a, b)
            if k not in seen:
                seen.add(k)
                out.append(k)
                break
    return out


def _strat3(points, t, rng):
    n = len(points)
    seen = set()
    used = np.zeros(n, dtype=bool)
    out = []
    anchors = rng.permutation(n)
    cursor = 0
    while len(out) < t:
        if cursor == len(anchors):
            anchors = rng.permutation(n)
            cursor = 0
        a = int(anchors[cursor])
        cursor += 1
        order = _far_order(points, a)
        order = order[order != a]
        pick = None
        for b in order[~used[order]]:
            if _key(a, int(b)) not in seen:
                pick = int(b)
                break
        if pick is None:
            for b in order:
                if _key(a, int(b)) not in seen:
                    pick = int(b)
                    break
        if pick is None:
            continue
        k = _key(a, pick)
        seen.add(k)
        used[a] = used[pick] = True
        out.append(k)
    return out


def sample_pairs(points, plan: SamplingPlan):
    """``plan.n_constraints`` distinct unordered pairs (i < j) of point indices.

    Strat1 draws uniformly.  Strat2 pairs a random anchor with its farthest
    unused partner.  Strat3 walks the anchor's partners by descending distance
    and takes the first point that has not been part of any pair yet, falling
    back to the farthest unpaired combination once every point is used.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    t = int(plan.n_constraints)
    total = n * (n - 1) // 2
    if n < 2 or t > total or t < 1:
        raise NotEnoughPairs(f"{t} pairs requested from {n} points ({total} available)")
    rng = np.random.default_rng(plan.seed)
    if plan.strategy == "Strat1":
        return _strat1(n, t, rng)
    if plan.strategy == "Strat2":
        return _strat2(points, t, rng)
    return _strat3(points, t, rng)
