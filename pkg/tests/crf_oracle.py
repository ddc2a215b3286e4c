"""Exhaustive-enumeration reference for tiny CRF instances.

Deliberately written with explicit loops over cell pairs so it shares no code
with the shifted-array implementation it checks.
"""
import itertools

import numpy as np

from semslam.segmentation import motion_kernel, object_kernel


def edges(shape, radius):
    H, W = shape
    cells = [(r, c) for r in range(H) for c in range(W)]
    out = []
    for a in range(len(cells)):
        for b in range(a + 1, len(cells)):
            (r1, c1), (r2, c2) = cells[a], cells[b]
            if (r1 - r2) ** 2 + (c1 - c2) ** 2 <= radius * radius:
                out.append((a, b))
    return cells, out


def brute_energy(xs, ys, unary, lam, params, appearance=None, flow=None):
    H, W = unary.shape
    cells, pairs = edges((H, W), params.radius)
    e = 0.0
    for n, (r, c) in enumerate(cells):
        e += unary.object_unary[r, c, xs[n]] + unary.motion_unary[r, c, ys[n]] + lam[xs[n], ys[n]]
    for a, b in pairs:
        (r1, c1), (r2, c2) = cells[a], cells[b]
        if xs[a] != xs[b]:
            ai = None if appearance is None else appearance[r1, c1]
            aj = None if appearance is None else appearance[r2, c2]
            e += object_kernel((r1, c1), (r2, c2), params, ai, aj)
        if ys[a] != ys[b] and flow is not None:
            fi, fj = flow[r1, c1], flow[r2, c2]
            if np.all(np.isfinite(fi)) and np.all(np.isfinite(fj)):
                e += motion_kernel(fi, fj, params)
    return e


def exact_marginals(unary, lam, params, appearance=None, flow=None):
    """Exact per-cell object and motion marginals of exp(-E)."""
    H, W = unary.shape
    L = unary.object_unary.shape[-1]
    n = H * W
    qo = np.zeros((n, L))
    qm = np.zeros((n, 2))
    states = []
    energies = []
    for xs in itertools.product(range(L), repeat=n):
        for ys in itertools.product(range(2), repeat=n):
            states.append((xs, ys))
            energies.append(brute_energy(xs, ys, unary, lam, params, appearance, flow))
    energies = np.array(energies)
    p = np.exp(-(energies - energies.min()))
    p /= p.sum()
    for prob, (xs, ys) in zip(p, states):
        for i in range(n):
            qo[i, xs[i]] += prob
            qm[i, ys[i]] += prob
    best = states[int(np.argmin(energies))]
    return qo.reshape(H, W, L), qm.reshape(H, W, 2), best
