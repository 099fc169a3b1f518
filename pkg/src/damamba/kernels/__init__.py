"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled Cython module is used when it was built at install time.
Set ``DAMAMBA_BACKEND=python`` to force the fallback, or call
:func:`set_backend` at runtime (the benchmark does this to compare both).
"""

from __future__ import annotations

import os

import numpy as np

from damamba.kernels import _scan_py

try:
    from damamba.kernels import _scan as _scan_c
except ImportError:  # extension not built
    _scan_c = None

HAVE_COMPILED = _scan_c is not None

_impl = _scan_py
BACKEND = "python"


def set_backend(name: str) -> str:
    """Select ``"compiled"`` or ``"python"``; returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "compiled":
        if _scan_c is None:
            raise RuntimeError("compiled kernels are not available; rebuild the package")
        _impl, BACKEND = _scan_c, "compiled"
    elif name == "python":
        _impl, BACKEND = _scan_py, "python"
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev


if os.environ.get("DAMAMBA_BACKEND", "").lower() != "python" and HAVE_COMPILED:
    set_backend("compiled")


def _prep(a: np.ndarray, u: np.ndarray):
    dtype = u.dtype if u.dtype in (np.float32, np.float64) else np.float64
    lead = u.shape[:-2]
    u3 = np.ascontiguousarray(u.reshape((int(np.prod(lead)),) + u.shape[-2:]), dtype=dtype)
    a1 = np.ascontiguousarray(a.reshape(-1), dtype=dtype)
    if a1.shape[0] != u3.shape[-1]:
        raise ValueError(f"decay width {a1.shape[0]} vs feature width {u3.shape[-1]}")
    return a1, u3, lead


def linear_scan(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``h_t = a * h_{t-1} + u_t`` along axis -2 of ``u`` (any leading axes)."""
    a1, u3, lead = _prep(a, u)
    return np.asarray(_impl.scan_forward(a1, u3)).reshape(lead + u3.shape[-2:])


def linear_scan_reverse(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``r_t = g_t + a * r_{t+1}`` along axis -2 of ``g``."""
    a1, g3, lead = _prep(a, g)
    return np.asarray(_impl.scan_reverse(a1, g3)).reshape(lead + g3.shape[-2:])
