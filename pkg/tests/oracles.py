"""Independent reference computations used by the tests (no package code inside)."""

import itertools

import numpy as np


def simplex_grid(T, steps=200):
    """All points of the simplex with coordinates in multiples of 1/steps."""
    if T == 1:
        return np.ones((1, 1))
    pts = []
    for head in itertools.product(range(steps + 1), repeat=T - 1):
        s = sum(head)
        if s <= steps:
            pts.append((*head, steps - s))
    return np.array(pts, dtype=float) / steps


def grid_min_sqnorm(G, steps=200):
    G = np.asarray(G, dtype=float)
    A = simplex_grid(len(G), steps)
    V = A @ G
    return float(np.min(np.einsum("ij,ij->i", V, V)))


def exact_min_sqnorm(G):
    """Exact min of ||alpha G||^2 over the simplex by enumerating faces (KKT on each)."""
    G = np.asarray(G, dtype=float)
    T = len(G)
    best = np.inf
    for k in range(1, T + 1):
        for S in itertools.combinations(range(T), k):
            GS = G[list(S)]
            M = GS @ GS.T
            A = np.block([[M, np.ones((k, 1))], [np.ones((1, k)), np.zeros((1, 1))]])
            b = np.r_[np.zeros(k), 1.0]
            sol = np.linalg.lstsq(A, b, rcond=None)[0][:k]
            if np.all(sol >= -1e-12) and abs(sol.sum() - 1) < 1e-9:
                v = sol @ GS
                best = min(best, float(v @ v))
    return best


def hull_distance(point, centers):
    """Euclidean distance from ``point`` to the convex hull of ``centers``."""
    diffs = np.asarray(point, dtype=float)[None, :] - np.asarray(centers, dtype=float)
    return float(np.sqrt(max(exact_min_sqnorm(diffs), 0.0)))


def gamma_grid(g1, g2, step=1e-4):
    """Brute-force weight on g1 minimising ||w g1 + (1-w) g2||^2."""
    w = np.arange(0.0, 1.0 + step / 2, step)
    V = w[:, None] * np.asarray(g1, float)[None, :] + (1 - w)[:, None] * np.asarray(g2, float)[None, :]
    return float(w[np.argmin(np.einsum("ij,ij->i", V, V))])
