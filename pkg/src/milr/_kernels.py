"""Compiled inner loops. Kept free of Python objects so numba can cache them."""

import numpy as np
from numba import njit


@njit(cache=True)
def soft_threshold(s, lam, denom):
    if s > lam:
        return (s - lam) / denom
    if s < -lam:
        return (s + lam) / denom
    return 0.0


@njit(cache=True)
def cd_sweep(X, w, r, beta0, beta, lam, coords):
    """One Gauss-Seidel pass: intercept first, then each slope in ``coords``.

    ``r`` holds the working residual ``u - beta0 - X beta`` and is updated in
    place together with ``beta``. Returns the new intercept and the largest
    absolute coefficient change. All-zero columns are left at zero.
    """
    n = X.shape[0]
    sw = 0.0
    swr = 0.0
    for i in range(n):
        sw += w[i]
        swr += w[i] * r[i]
    d0 = swr / sw
    beta0 += d0
    for i in range(n):
        r[i] -= d0
    max_change = abs(d0)
    for c in coords:
        denom = 0.0
        g = 0.0
        for i in range(n):
            wx = w[i] * X[i, c]
            denom += wx * X[i, c]
            g += wx * r[i]
        if denom <= 0.0:
            continue
        old = beta[c]
        new = soft_threshold(g + denom * old, lam, denom)
        if new != old:
            d = new - old
            for i in range(n):
                r[i] -= d * X[i, c]
            beta[c] = new
            if abs(d) > max_change:
                max_change = abs(d)
    return beta0, max_change


@njit(cache=True)
def coordinate_scores(X, w, r, beta):
    """``S_k`` and ``sum w x_k^2`` for every column at the current point."""
    n, p = X.shape
    S = np.empty(p)
    denom = np.empty(p)
    for c in range(p):
        d = 0.0
        g = 0.0
        for i in range(n):
            wx = w[i] * X[i, c]
            d += wx * X[i, c]
            g += wx * r[i]
        denom[c] = d
        S[c] = g + d * beta[c]
    return S, denom
