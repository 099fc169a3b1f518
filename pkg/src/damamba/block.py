"""Hybrid block: chunk-local softmax attention plus a linear SSM branch.

Forward composition for input ``X`` (frames on axis -2)::

    U  = X + Dropout(local_attn(X) + Proj(SSM(conv(X))))
    X' = U + Dropout(FFN(LayerNorm(U)))

``backend="attention"`` drops the SSM branch and attends over the whole
sequence, which is the Transformer baseline used in ablations and in the
scaling benchmark.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from damamba import tensor as T
from damamba.errors import ConfigError, DimensionError
from damamba.params import Affine, Norm, affine, norm, param_count  # noqa: F401  (re-export)
from damamba.ssm import SSMParams, causal_conv1d, ssm_scan
from damamba.tensor import Tensor

RESIDUAL_GAIN = 0.25  # init gain of the attention / SSM output projections


@dataclass
class AttnParams:
    q: Affine
    k: Affine
    v: Affine
    o: Affine
    heads: int = 1


@dataclass
class FFNParams:
    up: Affine
    down: Affine


@dataclass
class SSMBranchParams:
    conv_w: Tensor  # (kernel, d)
    conv_b: Tensor
    a_raw: Tensor  # (d, d_state); A = sigmoid(a_raw) keeps |A| < 1
    B: Tensor | None  # None in selective mode, where B and C come from sel_B / sel_C
    C: Tensor | None
    D: Tensor
    proj: Affine
    sel_B: Affine | None = None
    sel_C: Affine | None = None

    @property
    def selective(self) -> bool:
        return self.sel_B is not None


@dataclass
class MambaBlockParams:
    attn: AttnParams
    ssm: SSMBranchParams | None
    ffn: FFNParams
    norm: Norm
    chunk_size: int | None  # None: attend over the full sequence
    dropout: float = 0.1

    @property
    def width(self) -> int:
        return self.norm.gain.shape[0]

    @property
    def backend(self) -> str:
        return "mamba" if self.ssm is not None else "attention"


def init_attention(
    rng: np.random.Generator, d: int, heads: int = 1, dtype=np.float64, out_gain: float = 1.0
) -> AttnParams:
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    q, k, v = (affine(rng, d, d, dtype) for _ in range(3))
    return AttnParams(q, k, v, affine(rng, d, d, dtype, gain=out_gain), heads=heads)


def init_block(
    rng: np.random.Generator,
    d: int,
    *,
    chunk_size: int | None = 32,
    d_state: int = 16,
    conv_kernel: int = 4,
    expand: int = 2,
    heads: int = 1,
    dropout: float = 0.1,
    selective: bool = False,
    backend: str = "mamba",
    dtype=np.float64,
) -> MambaBlockParams:
    """Random block of width ``d``; FFN hidden width is ``expand * d``."""
    if chunk_size is not None and chunk_size < 1:
        raise ConfigError(f"chunk_size must be >= 1, got {chunk_size}")
    if backend not in ("mamba", "attention"):
        raise ConfigError(f"unknown block backend {backend!r}")
    # the mixing branches read the raw residual stream, so their outputs start
    # small; otherwise activations compound geometrically with depth
    attn = init_attention(rng, d, heads, dtype, out_gain=RESIDUAL_GAIN)
    ssm = None
    if backend == "mamba":
        # decays spread over [0.6, 0.99] so states mix short and long memory
        a0 = rng.uniform(0.6, 0.99, size=(d, d_state))
        B0 = rng.normal(0, 1 / math.sqrt(d_state), (d, d_state)) * (1 - a0)
        C0 = rng.normal(0, 1 / math.sqrt(d_state), (d, d_state))
        ssm = SSMBranchParams(
            conv_w=Tensor(rng.normal(0, 1 / math.sqrt(conv_kernel), (conv_kernel, d)).astype(dtype), requires_grad=True),
            conv_b=Tensor(np.zeros(d, dtype), requires_grad=True),
            a_raw=Tensor(np.log(a0 / (1 - a0)).astype(dtype), requires_grad=True),
            # (1 - a) keeps each state's DC gain near 1 so depth does not inflate activations
            B=None if selective else Tensor(B0.astype(dtype), requires_grad=True),
            C=None if selective else Tensor(C0.astype(dtype), requires_grad=True),
            D=Tensor(np.ones(d, dtype), requires_grad=True),
            proj=affine(rng, d, d, dtype, gain=RESIDUAL_GAIN),
            sel_B=affine(rng, d, d_state, dtype) if selective else None,
            sel_C=affine(rng, d, d_state, dtype) if selective else None,
        )
        chunk = chunk_size
    else:
        chunk = None
    ffn = FFNParams(affine(rng, d, expand * d, dtype), affine(rng, expand * d, d, dtype, gain=0.5))
    return MambaBlockParams(attn, ssm, ffn, norm(d, dtype), chunk, dropout)


# -- attention ----------------------------------------------------------------


def _attend(Q: Tensor, K: Tensor, V: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over axis -2; leading axes are batch."""
    *lead, Lq, d = Q.shape
    Lk = K.shape[-2]
    dh = d // heads
    if heads == 1:
        scores = T.scale(T.matmul(Q, T.swap_last(K)), 1.0 / math.sqrt(dh))
        return T.matmul(T.softmax_rows(scores), V)
    nl = len(lead)
    split = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    q = T.permute(T.reshape(Q, (*lead, Lq, heads, dh)), split)
    k = T.permute(T.reshape(K, (*lead, Lk, heads, dh)), split)
    v = T.permute(T.reshape(V, (*lead, Lk, heads, dh)), split)
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(dh))
    o = T.matmul(T.softmax_rows(scores), v)
    return T.reshape(T.permute(o, split), (*lead, Lq, d))


def chunked_local_attention(X: Tensor, attn: AttnParams, chunk_size: int | None) -> Tensor:
    """Self-attention restricted to non-overlapping chunks of ``chunk_size`` frames.

    The last chunk is short when ``chunk_size`` does not divide ``n``.
    ``None`` means one chunk covering the whole sequence.
    """
    if chunk_size is not None and chunk_size <= 0:
        raise ConfigError(f"chunk_size must be >= 1, got {chunk_size}")
    *lead, n, d = X.shape
    if d != attn.q.W.shape[0]:
        raise DimensionError(f"attention width {attn.q.W.shape[0]} vs input {X.shape}")
    s = n if chunk_size is None else min(chunk_size, n)
    Q = T.linear(X, attn.q.W, attn.q.b)
    K = T.linear(X, attn.k.W, attn.k.b)
    V = T.linear(X, attn.v.W, attn.v.b)
    full = (n // s) * s
    pieces = []
    if full:
        shp = (*lead, n // s, s, d)
        sl = (Ellipsis, slice(0, full), slice(None))
        q, k, v = (T.reshape(t[sl] if full < n else t, shp) for t in (Q, K, V))
        pieces.append(T.reshape(_attend(q, k, v, attn.heads), (*lead, full, d)))
    if full < n:
        sl = (Ellipsis, slice(full, n), slice(None))
        pieces.append(_attend(Q[sl], K[sl], V[sl], attn.heads))
    out = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=-2)
    return T.linear(out, attn.o.W, attn.o.b)


def full_attention(X: Tensor, attn: AttnParams) -> Tensor:
    """Dense self-attention; materializes the full n x n score matrix."""
    Q = T.linear(X, attn.q.W, attn.q.b)
    K = T.linear(X, attn.k.W, attn.k.b)
    V = T.linear(X, attn.v.W, attn.v.b)
    return T.linear(_attend(Q, K, V, attn.heads), attn.o.W, attn.o.b)


def cross_attention(X: Tensor, ctx: Tensor, attn: AttnParams) -> Tensor:
    """Queries from ``X``, keys and values projected from ``ctx``."""
    Q = T.linear(X, attn.q.W, attn.q.b)
    K = T.linear(ctx, attn.k.W, attn.k.b)
    V = T.linear(ctx, attn.v.W, attn.v.b)
    return T.linear(_attend(Q, K, V, attn.heads), attn.o.W, attn.o.b)


# -- block ------------------------------------------------------------------------


def effective_ssm(branch: SSMBranchParams, xc: Tensor) -> SSMParams:
    A = T.sigmoid(branch.a_raw)
    if branch.selective:
        B = T.linear(xc, branch.sel_B.W, branch.sel_B.b)
        C = T.linear(xc, branch.sel_C.W, branch.sel_C.b)
        return SSMParams(A, B, C, branch.D, selective=True)
    return SSMParams(A, branch.B, branch.C, branch.D)


def ssm_branch(X: Tensor, branch: SSMBranchParams) -> Tensor:
    """conv -> recurrence; returns Y_ssm before the output projection."""
    xc = causal_conv1d(X, branch.conv_w, branch.conv_b)
    return ssm_scan(xc, effective_ssm(branch, xc))


def ffn(x: Tensor, p: FFNParams) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p.up.W, p.up.b)), p.down.W, p.down.b)


def mamba_block_forward(X: Tensor, params: MambaBlockParams, rng: np.random.Generator | None = None) -> Tensor:
    """One hybrid block; ``rng=None`` is eval mode (dropout off)."""
    if X.shape[-1] != params.width:
        raise DimensionError(f"block width {params.width} vs input {X.shape}")
    mix = chunked_local_attention(X, params.attn, params.chunk_size)
    if params.ssm is not None:
        y_ssm = ssm_branch(X, params.ssm)
        mix = mix + T.linear(y_ssm, params.ssm.proj.W, params.ssm.proj.b)
    U = X + T.dropout(mix, params.dropout, rng)
    h = ffn(T.layer_norm(U, params.norm.gain, params.norm.bias), params.ffn)
    return U + T.dropout(h, params.dropout, rng)


def apply_mask(X: Tensor, mask: np.ndarray | None) -> Tensor:
    """Zero the frames where ``mask`` (shape ``X.shape[:-1]``) is False."""
    if mask is None:
        return X
    m = np.asarray(mask, dtype=X.dtype)
    if m.shape != X.shape[:-1]:
        raise DimensionError(f"frame mask {m.shape} vs input {X.shape}")
    return X * np.ascontiguousarray(np.broadcast_to(m[..., None], X.shape))


def mamba_stack(
    X: Tensor,
    layers: Sequence[MambaBlockParams],
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Blocks applied in order. With a frame ``mask``, padded frames are reset
    to zero after every block so they stay padding all the way up."""
    widths = {p.width for p in layers}
    if len(widths) > 1:
        raise ConfigError(f"stack layers have inconsistent widths {sorted(widths)}")
    for p in layers:
        X = apply_mask(mamba_block_forward(X, p, rng), mask)
    return X
