"""Pure-numpy fallback for the diagonal linear recurrence.

Time is split into blocks of ``BLOCK`` steps. Inside a block the
recurrence is unrolled into a lower-triangular decay matrix
``L[i, j] = a**(i - j)`` and applied with one einsum; the carry from the
previous block enters through ``a**(i + 1)``. Only ``n / BLOCK`` Python
iterations remain.
"""

from __future__ import annotations

import numpy as np

BLOCK = 16


def _decay_tables(a: np.ndarray, T: int):
    steps = np.arange(T)
    diff = steps[:, None] - steps[None, :]
    lower = diff >= 0
    # a**k for k = 0..T; integer powers keep a == 0 and a < 0 exact
    powers = np.stack([a**k for k in range(T + 1)])  # (T+1, F)
    L = np.where(lower[:, :, None], powers[np.clip(diff, 0, T)], 0.0).astype(a.dtype)
    carry = powers[1 : T + 1]  # (T, F)
    return L, carry


def scan_forward(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    B, n, F = u.shape
    out = np.empty_like(u)
    if n == 0:
        return out
    T = min(BLOCK, n)
    L, carry = _decay_tables(a, T)
    h_prev = np.zeros((B, F), dtype=u.dtype)
    for start in range(0, n, T):
        stop = min(start + T, n)
        m = stop - start
        blk = np.einsum("ijf,bjf->bif", L[:m, :m], u[:, start:stop])
        blk += carry[:m][None] * h_prev[:, None, :]
        out[:, start:stop] = blk
        h_prev = blk[:, -1]
    return out


def scan_reverse(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    return scan_forward(a, g[:, ::-1])[:, ::-1].copy()
