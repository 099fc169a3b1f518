"""Linear state-space branch: diagonal recurrence, causal conv, and oracle.

The recurrence per channel ``c`` and state ``k`` is::

    s[t, c, k] = A[c, k] * s[t-1, c, k] + B[c, k] * x[t, c]
    y[t, c]    = sum_k C[c, k] * s[t, c, k] + D[c] * x[t, c]

With ``selective=True`` the input and output maps become per-frame vectors
``B[t, k]`` / ``C[t, k]`` shared across channels. The decay ``A`` stays
time-invariant in both modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from damamba import kernels
from damamba.errors import DimensionError, ValidationError
from damamba.tensor import Tensor, _accum, _result, as_tensor


@dataclass
class SSMParams:
    """Effective (already squashed) SSM matrices for one branch."""

    A: Tensor  # (d, d_state) diagonal decays
    B: Tensor  # (d, d_state), or (..., n, d_state) when selective
    C: Tensor  # same layout as B
    D: Tensor  # (d,)
    selective: bool = False

    @property
    def d_state(self) -> int:
        return self.A.shape[1]

    @property
    def width(self) -> int:
        return self.A.shape[0]


def check_stable(A: np.ndarray) -> None:
    worst = float(np.max(np.abs(A))) if A.size else 0.0
    if worst >= 1.0:
        raise ValidationError(f"unstable SSM: max |A| = {worst:.6g} (needs < 1)")


def ssm_scan(x: Tensor, ssm: SSMParams, check: bool = True) -> Tensor:
    """Run the recurrence over axis -2 of ``x`` (shape ``(..., n, d)``).

    Uses the fast kernel from :mod:`damamba.kernels`; ``ssm_scan_naive`` is
    the per-step reference it is tested against.
    """
    A, B, C, D = ssm.A, ssm.B, ssm.C, ssm.D
    d, N = A.shape
    if x.shape[-1] != d:
        raise DimensionError(f"ssm_scan: input width {x.shape[-1]} vs A {A.shape}")
    if D.shape != (d,):
        raise DimensionError(f"ssm_scan: D {D.shape} vs width {d}")
    n = x.shape[-2]
    if ssm.selective:
        want = x.shape[:-1] + (N,)
        if B.shape != want or C.shape != want:
            raise DimensionError(f"selective ssm_scan: B {B.shape} / C {C.shape}, expected {want}")
    elif B.shape != (d, N) or C.shape != (d, N):
        raise DimensionError(f"ssm_scan: B {B.shape} / C {C.shape} vs A {A.shape}")
    if check:
        check_stable(A.data)

    lead = x.shape[:-2]
    x3 = x.data.reshape(-1, n, d)
    a_flat = A.data.reshape(-1)
    if ssm.selective:
        Bt = B.data.reshape(-1, n, N)
        Ct = C.data.reshape(-1, n, N)
        u = x3[..., :, None] * Bt[:, :, None, :]
    else:
        u = x3[..., :, None] * B.data
    h = kernels.linear_scan(a_flat, u.reshape(-1, n, d * N)).reshape(u.shape)
    if ssm.selective:
        y = (h * Ct[:, :, None, :]).sum(-1)
    else:
        y = (h * C.data).sum(-1)
    y += x3 * D.data

    def bw(gy):
        gy3 = gy.reshape(-1, n, d)
        if ssm.selective:
            gh = gy3[..., None] * Ct[:, :, None, :]
            if C.requires_grad:
                _accum(C, np.einsum("btd,btdk->btk", gy3, h).reshape(C.shape))
        else:
            gh = gy3[..., None] * C.data
            if C.requires_grad:
                _accum(C, np.einsum("btd,btdk->dk", gy3, h))
        if D.requires_grad:
            _accum(D, (gy3 * x3).sum(axis=(0, 1)))
        g = kernels.linear_scan_reverse(a_flat, gh.reshape(-1, n, d * N)).reshape(gh.shape)
        if A.requires_grad:
            _accum(A, np.einsum("btdk,btdk->dk", g[:, 1:], h[:, :-1]))
        if ssm.selective:
            if B.requires_grad:
                _accum(B, np.einsum("btdk,btd->btk", g, x3).reshape(B.shape))
            gx = np.einsum("btdk,btk->btd", g, Bt)
        else:
            if B.requires_grad:
                _accum(B, np.einsum("btdk,btd->dk", g, x3))
            gx = np.einsum("btdk,dk->btd", g, B.data)
        if x.requires_grad:
            _accum(x, (gx + gy3 * D.data).reshape(x.shape))

    return _result(y.reshape(lead + (n, d)), (x, A, B, C, D), bw, "ssm_scan")


def ssm_scan_naive(x, A, B, C, D) -> np.ndarray:
    """Per-step recurrence with dense matrices; the reference oracle.

    ``x``: (n, d). ``A``: (S, S). ``B``: (S, d) or per-frame (n, S, d).
    ``C``: (d, S) or per-frame (n, d, S). ``D``: (d,). Returns (n, d).
    """
    x = np.asarray(x, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    n, d = x.shape
    s = np.zeros(A.shape[0])
    out = np.empty((n, d))
    for t in range(n):
        Bt = B[t] if B.ndim == 3 else B
        Ct = C[t] if C.ndim == 3 else C
        s = A @ s + Bt @ x[t]
        out[t] = Ct @ s + D * x[t]
    return out


def dense_from_diagonal(ssm: SSMParams):
    """Expand diagonal per-channel parameters to block-diagonal dense matrices.

    State index ``c * d_state + k`` holds channel ``c``, state ``k``. Only
    unbatched selective inputs (B, C of shape (n, d_state)) are supported.
    """
    A = ssm.A.data
    d, N = A.shape
    S = d * N
    A_dense = np.diag(A.reshape(-1))
    rows = np.arange(S)
    chan = rows // N
    if ssm.selective:
        Bt, Ct = ssm.B.data, ssm.C.data
        n = Bt.shape[0]
        B_dense = np.zeros((n, S, d))
        C_dense = np.zeros((n, d, S))
        for t in range(n):
            B_dense[t, rows, chan] = np.tile(Bt[t], d)
            C_dense[t, chan, rows] = np.tile(Ct[t], d)
    else:
        B_dense = np.zeros((S, d))
        C_dense = np.zeros((d, S))
        B_dense[rows, chan] = ssm.B.data.reshape(-1)
        C_dense[chan, rows] = ssm.C.data.reshape(-1)
    return A_dense, B_dense, C_dense, ssm.D.data.copy()


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal convolution over frames.

    ``y[t, c] = b[c] + sum_j w[j, c] * x[t - j, c]`` with zeros before frame 0.
    ``w`` has shape (kernel, d).
    """
    x = as_tensor(x)
    K, d = w.shape
    if x.shape[-1] != d or b.shape != (d,):
        raise DimensionError(f"causal_conv1d: x {x.shape}, w {w.shape}, b {b.shape}")
    n = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(K - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    y = np.broadcast_to(b.data, x.shape).copy()
    for j in range(K):
        lo = K - 1 - j
        y += w.data[j] * xp[..., lo : lo + n, :]

    def bw(g):
        if b.requires_grad:
            _accum(b, g.reshape(-1, d).sum(axis=0))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for j in range(K):
                lo = K - 1 - j
                gw[j] = (g * xp[..., lo : lo + n, :]).reshape(-1, d).sum(axis=0)
            _accum(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(K):
                lo = K - 1 - j
                gxp[..., lo : lo + n, :] += g * w.data[j]
            _accum(x, gxp[..., K - 1 :, :])

    return _result(y, (x, w, b), bw, "causal_conv1d")
