"""Exact Euclidean projections used by the feasible-set machinery.

All functions are vectorized over arbitrary leading dimensions; the schedule
axis is the last one.
"""

from __future__ import annotations

import numpy as np

from ..errors import ModelError


def project_simplex(v: np.ndarray, radius) -> np.ndarray:
    """Project rows of ``v`` onto {x : sum(x) = radius, x >= 0}.

    Sort-and-threshold algorithm: with u the coordinates sorted in descending
    order, the optimal threshold is tau = (sum of the rho largest u - radius)/rho
    where rho is the largest prefix length keeping u - tau positive. O(T log T),
    exact, idempotent. ``radius`` may be a scalar or an array broadcastable to
    the leading dimensions of ``v``.
    """
    radius = np.asarray(radius, dtype=float)
    if np.any(radius < 0):
        raise ModelError("simplex radius must be nonnegative")
    v = np.asarray(v, dtype=float)
    u = np.sort(v, axis=-1)[..., ::-1]
    css = np.cumsum(u, axis=-1) - radius[..., None]
    j = np.arange(1, v.shape[-1] + 1, dtype=float)
    cond = u - css / j > 0
    # rho: index of the last True (there is always at least one)
    rho = v.shape[-1] - 1 - np.argmax(cond[..., ::-1], axis=-1)
    tau = np.take_along_axis(np.broadcast_to(css, cond.shape).copy(),
                             rho[..., None], axis=-1) / (rho[..., None] + 1.0)
    return np.maximum(v - tau, 0.0)


def project_hyperplane(v: np.ndarray, radius) -> np.ndarray:
    """Project rows of ``v`` onto {x : sum(x) = radius} (uniform shift)."""
    v = np.asarray(v, dtype=float)
    radius = np.asarray(radius, dtype=float)
    T = v.shape[-1]
    shift = (radius[..., None] - v.sum(axis=-1, keepdims=True)) / T
    return v + shift


def project_box_hyperplane(v: np.ndarray, lo: float, hi: float, radius,
                           iters: int = 100) -> np.ndarray:
    """Project rows of ``v`` onto {x : sum(x) = radius, lo <= x <= hi}.

    The projection is clip(v + tau, lo, hi) for the unique tau making the sum
    hit ``radius``; tau is found by bisection (the sum is nondecreasing and
    piecewise linear in tau). 100 halvings of the initial bracket leave an
    interval below 1e-25 of its width, i.e. exact to double precision.
    """
    v = np.asarray(v, dtype=float)
    radius = np.asarray(radius, dtype=float)
    T = v.shape[-1]
    if np.any(radius < lo * T) or np.any(radius > hi * T):
        raise ModelError("box-hyperplane intersection is empty")
    lo_tau = np.broadcast_to(lo - v.max(axis=-1), np.broadcast_shapes(
        v.shape[:-1], radius.shape)).astype(float).copy()
    hi_tau = np.broadcast_to(hi - v.min(axis=-1), lo_tau.shape).astype(float).copy()
    radius = np.broadcast_to(radius, lo_tau.shape)
    for _ in range(iters):
        mid = 0.5 * (lo_tau + hi_tau)
        s = np.clip(v + mid[..., None], lo, hi).sum(axis=-1)
        too_low = s < radius
        lo_tau = np.where(too_low, mid, lo_tau)
        hi_tau = np.where(too_low, hi_tau, mid)
    tau = 0.5 * (lo_tau + hi_tau)
    return np.clip(v + tau[..., None], lo, hi)


def project_simplex_bruteforce(v: np.ndarray, radius: float) -> np.ndarray:
    """Reference projection by enumerating all supports of the simplex faces.

    For each nonempty support S the face-restricted minimizer is the uniform
    shift of v restricted to S; the global projection is the feasible
    candidate with the smallest distance. O(2^T), test oracle only.
    """
    v = np.asarray(v, dtype=float).ravel()
    T = v.size
    best, best_d = None, np.inf
    for mask in range(1, 2 ** T):
        idx = [i for i in range(T) if mask >> i & 1]
        x = np.zeros(T)
        x[idx] = v[idx] + (radius - v[idx].sum()) / len(idx)
        if np.any(x[idx] < -1e-13):
            continue
        d = float(np.sum((x - v) ** 2))
        if d < best_d - 1e-15:
            best, best_d = x, d
    return np.maximum(best, 0.0)
