"""Common-descent directions from per-task gradients.

Sign convention: a direction ``d`` is an element of the convex hull of the
task gradients, so ``g_t . d >= 0`` for every task and parameters move as
``theta - eta * d``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, ShapeError

SHARED = "shared-parameter"
LATENT = "latent"


@dataclass(frozen=True)
class Direction:
    vector: np.ndarray
    weights: np.ndarray
    space: str = SHARED

    @property
    def sqnorm(self) -> float:
        return float(self.vector @ self.vector)


def _as_matrix(grads: Sequence[np.ndarray]) -> np.ndarray:
    if len(grads) == 0:
        raise InputError("need at least one gradient")
    rows = [np.asarray(g, dtype=np.float64).ravel() for g in grads]
    if len({r.size for r in rows}) != 1:
        raise ShapeError("gradients differ in length")
    return np.stack(rows)


def _pair_step(aa: float, ab: float, bb: float) -> float:
    """Weight on ``a`` minimising ||w a + (1-w) b||^2 over w in [0, 1]."""
    denom = aa - 2.0 * ab + bb
    if denom <= 0.0:
        return 1.0
    return float(np.clip((bb - ab) / denom, 0.0, 1.0))


def _affine_minimiser(M: np.ndarray, support: np.ndarray) -> np.ndarray | None:
    """Minimiser of ``a M a`` subject to ``sum(a) = 1`` over ``support`` (may be negative)."""
    k = support.size
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = M[np.ix_(support, support)]
    K[:k, k] = K[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0][:k]
    if not np.all(np.isfinite(sol)) or abs(sol.sum() - 1.0) > 1e-9:
        return None
    return sol


def _face_correction(M: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Wolfe-style minor cycles: move toward the affine minimiser of the support,
    dropping vertices whose weight hits zero, until that minimiser is feasible."""
    alpha = alpha.copy()
    for _ in range(alpha.size):
        support = np.flatnonzero(alpha > 0.0)
        if support.size < 2:
            break
        beta = _affine_minimiser(M, support)
        if beta is None:
            break
        if beta.min() >= 0.0:
            alpha[support] = beta
            break
        cur = alpha[support]
        neg = beta < 0.0
        ratios = cur[neg] / (cur[neg] - beta[neg])
        theta = float(ratios.min())
        new = cur + theta * (beta - cur)
        new[np.flatnonzero(neg)[np.argmin(ratios)]] = 0.0
        alpha[support] = np.clip(new, 0.0, None)
    return alpha / alpha.sum()


def min_norm_2(g1, g2, space: str = SHARED) -> Direction:
    """Closed-form min-norm point on the segment between two gradients."""
    a = np.asarray(g1, dtype=np.float64).ravel()
    b = np.asarray(g2, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError("gradients differ in length")
    if np.array_equal(a, b):
        return Direction(a.copy(), np.array([1.0, 0.0]), space)
    gamma = _pair_step(a @ a, a @ b, b @ b)
    return Direction(gamma * a + (1.0 - gamma) * b, np.array([gamma, 1.0 - gamma]), space)


def min_norm_fw(grads: Sequence[np.ndarray], max_iter: int = 250, tol: float = 1e-9,
                space: str = SHARED) -> Direction:
    """Frank-Wolfe on the simplex for ``argmin ||sum_t alpha_t g_t||^2``.

    Works on the T x T Gram matrix, so cost per iteration is independent of
    the gradient dimension.  Each iteration takes the better of the classic
    step toward the best vertex and a pairwise step that also drains the
    worst active vertex; the latter gives linear convergence when the
    optimum sits on a face of the simplex.  After every step a
    Wolfe-style correction moves to the minimiser over the current support
    (shrinking the support while that minimiser is infeasible), which settles
    ill-conditioned sets (T > dim) that plain Frank-Wolfe only approaches
    slowly.  Stops once the Frank-Wolfe gap
    ``||d||^2 - min_t g_t . d`` drops below ``tol``, no step makes progress,
    or ``max_iter`` is reached.
    """
    G = _as_matrix(grads)
    T = G.shape[0]
    if T == 1:
        return Direction(G[0].copy(), np.ones(1), space)
    M = G @ G.T
    alpha = np.full(T, 1.0 / T)
    Ma = M @ alpha
    for _ in range(max_iter):
        obj = float(alpha @ Ma)
        t = int(np.argmin(Ma))
        gap = obj - Ma[t]
        if gap <= tol:
            break
        # Steps are scored by their analytic decrease, which is built from
        # gradient differences and stays accurate when the objective itself
        # no longer resolves progress.
        # classic step: exact line search from alpha toward e_t
        curv = obj - 2.0 * Ma[t] + M[t, t]
        lam_c = min(gap / curv, 1.0) if curv > 0.0 else 1.0
        best_gain, step = 2.0 * lam_c * gap - lam_c * lam_c * curv, None
        # pairwise step: shift mass from the worst active vertex onto e_t
        active = np.flatnonzero(alpha > 0.0)
        s = int(active[np.argmax(Ma[active])])
        curv_p = M[t, t] - 2.0 * M[t, s] + M[s, s]
        diff = Ma[s] - Ma[t]
        if s != t and diff > 0.0:
            lam_p = min(diff / curv_p, alpha[s]) if curv_p > 0.0 else alpha[s]
            gain = 2.0 * lam_p * diff - lam_p * lam_p * curv_p
            if gain > best_gain:
                best_gain, step = gain, (s, lam_p)
        if not best_gain > 0.0:
            break
        if step is None:
            alpha = (1.0 - lam_c) * alpha
            alpha[t] += lam_c
        else:
            s, lam_p = step
            alpha = alpha.copy()
            alpha[t] += lam_p
            alpha[s] = max(alpha[s] - lam_p, 0.0)
        Ma = M @ alpha
        # correction on the current face; kept only if it does not lose ground
        trial = _face_correction(M, alpha)
        Mt = M @ trial
        if trial @ Mt <= alpha @ Ma:
            alpha, Ma = trial, Mt
    alpha = np.clip(alpha, 0.0, None)
    alpha /= alpha.sum()
    return Direction(alpha @ G, alpha, space)


def pcgrad(grads: Sequence[np.ndarray], rng: np.random.Generator, space: str = SHARED) -> Direction:
    """Gradient surgery: project out pairwise conflicts, then average."""
    G = _as_matrix(grads)
    T = G.shape[0]
    projected = G.copy()
    for i in range(T):
        for j in rng.permutation(T):
            if j == i:
                continue
            gj = G[j]
            nn = gj @ gj
            dot = projected[i] @ gj
            if nn > 0.0 and dot < 0.0:
                projected[i] -= (dot / nn) * gj
    return Direction(projected.mean(axis=0), np.full(T, 1.0 / T), space)


def is_pareto_stationary(grads: Sequence[np.ndarray], tol: float = 1e-6) -> bool:
    d = min_norm_fw(grads)
    return bool(np.sqrt(d.sqnorm) <= tol)


def min_norm_residual(grads: Sequence[np.ndarray]) -> float:
    """Norm of the min-norm hull element; zero exactly at Pareto stationarity."""
    return float(np.sqrt(min_norm_fw(grads).sqnorm))
