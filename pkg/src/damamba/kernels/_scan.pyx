# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled diagonal linear-recurrence kernels.

Both kernels work on (batch, time, features) buffers with a time-invariant
per-feature decay ``a``.
"""

import numpy as np

ctypedef fused real:
    float
    double


def scan_forward(real[::1] a, real[:, :, ::1] u):
    """h[b, t] = a * h[b, t-1] + u[b, t], with h[b, -1] = 0."""
    cdef Py_ssize_t B = u.shape[0], T = u.shape[1], F = u.shape[2]
    cdef Py_ssize_t b, t, f
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, T, F), dtype=dtype)
    cdef real[:, :, ::1] h = out
    if T == 0:
        return out
    with nogil:
        for b in range(B):
            for f in range(F):
                h[b, 0, f] = u[b, 0, f]
            for t in range(1, T):
                for f in range(F):
                    h[b, t, f] = a[f] * h[b, t - 1, f] + u[b, t, f]
    return out


def scan_reverse(real[::1] a, real[:, :, ::1] g):
    """r[b, t] = g[b, t] + a * r[b, t+1], with r[b, T] = 0."""
    cdef Py_ssize_t B = g.shape[0], T = g.shape[1], F = g.shape[2]
    cdef Py_ssize_t b, t, f
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, T, F), dtype=dtype)
    cdef real[:, :, ::1] r = out
    if T == 0:
        return out
    with nogil:
        for b in range(B):
            for f in range(F):
                r[b, T - 1, f] = g[b, T - 1, f]
            for t in range(T - 2, -1, -1):
                for f in range(F):
                    r[b, t, f] = g[b, t, f] + a[f] * r[b, t + 1, f]
    return out
