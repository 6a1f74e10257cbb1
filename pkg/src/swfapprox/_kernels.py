"""Numba kernels for the batch-heavy inner loops.

Everything here is a plain function of arrays; no package types cross the
numba boundary.  Results are independent of thread count: each parallel
iteration writes only its own row.
"""

import numpy as np
from numba import njit, prange

__all__ = ["rk4_model_batch"]


@njit(cache=True, inline="always")
def _model_field(x, ldiag, weights, t_idx, t_vals, R, af, bf, out):
    d = x.shape[0]
    r2 = 0.0
    for a in range(d):
        r2 += x[a] * x[a]
    r = np.sqrt(r2)
    aR = af * R
    bR = bf * R
    if r <= aR:
        u = 1.0
    elif r >= bR:
        u = 0.0
    else:
        s = (r - aR) / (bR - aR)
        u = 1.0 - s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
    if u == 0.0:
        for a in range(d):
            out[a] = 0.0
        return
    for a in range(d):
        out[a] = ldiag[a] * x[a]
    for e in range(t_idx.shape[0]):
        i = t_idx[e, 0]
        j = t_idx[e, 1]
        k = t_idx[e, 2]
        out[i] += weights[i] * t_vals[e] * (weights[j] * x[j]) * (weights[k] * x[k])
    for a in range(d):
        out[a] = -u * out[a]


@njit(cache=True, parallel=True)
def rk4_model_batch(X, T, n_steps, ldiag, weights, t_idx, t_vals, R, af, bf):
    """Fixed-step RK4 endpoints of the truncated-model flow for a batch of points."""
    n, d = X.shape
    out = np.empty_like(X)
    dt = T / n_steps
    for p in prange(n):
        x = np.empty(d)
        xs = np.empty(d)
        k1 = np.empty(d)
        k2 = np.empty(d)
        k3 = np.empty(d)
        k4 = np.empty(d)
        for a in range(d):
            x[a] = X[p, a]
        for _ in range(n_steps):
            _model_field(x, ldiag, weights, t_idx, t_vals, R, af, bf, k1)
            for a in range(d):
                xs[a] = x[a] + 0.5 * dt * k1[a]
            _model_field(xs, ldiag, weights, t_idx, t_vals, R, af, bf, k2)
            for a in range(d):
                xs[a] = x[a] + 0.5 * dt * k2[a]
            _model_field(xs, ldiag, weights, t_idx, t_vals, R, af, bf, k3)
            for a in range(d):
                xs[a] = x[a] + dt * k3[a]
            _model_field(xs, ldiag, weights, t_idx, t_vals, R, af, bf, k4)
            for a in range(d):
                x[a] = x[a] + (dt / 6.0) * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a])
        for a in range(d):
            out[p, a] = x[a]
    return out
