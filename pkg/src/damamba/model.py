"""The dialogue-aware network.

Per participant: cue projection -> per-cue block -> modality groups ->
group stacks (audio and visual). Partners' group outputs are concatenated
along the frame axis, encoded by a context stack per modality, and read by
the target's frames through pre-norm cross-attention. The two attended
streams are concatenated, normalized, and mapped to one score per frame.

Batched tensors use the layout ``(batch, participant, frame, feature)``
with the target at participant index 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from damamba import tensor as T
from damamba.block import (
    AttnParams,
    FFNParams,
    MambaBlockParams,
    apply_mask,
    cross_attention,
    ffn,
    init_attention,
    init_block,
    mamba_stack,
)
from damamba.config import ModelConfig
from damamba.errors import AlignmentError, ConfigError, DimensionError, UsageError
from damamba.features import CUE_NAMES, CUE_WIDTHS, Session, build_modality_groups, encode_cue, project_cue
from damamba.params import Affine, Norm, affine, norm
from damamba.tensor import Tensor


@dataclass
class GroupStack:
    in_proj: Affine
    layers: list[MambaBlockParams]


@dataclass
class XAttnParams:
    attn: AttnParams
    norm1: Norm
    ffn: FFNParams
    norm2: Norm


@dataclass
class Head:
    hidden: Affine
    out: Affine


@dataclass
class ModelParams:
    proj: dict[str, Affine]
    cue_enc: dict[str, MambaBlockParams]
    audio: GroupStack
    visual: GroupStack | None
    ctx_audio: list[MambaBlockParams]
    ctx_visual: list[MambaBlockParams]
    xattn_audio: XAttnParams | None
    xattn_visual: XAttnParams | None
    fuse_norm: Norm
    head: Head
    align_proj: Affine | None = None


@dataclass
class GroupEmbeddings:
    audio: Tensor  # (n, k_a)
    visual: Tensor | None  # (n, k_v)
    pid: str


@dataclass
class PartnerContext:
    audio_ctx: Tensor  # ((M-1) n, k_a)
    visual_ctx: Tensor | None
    order: list[str]


@dataclass
class ForwardOutput:
    pred: Tensor  # (B, n, 1)
    audio: Tensor  # (B, M, n, k_a) group embeddings of every participant
    visual: Tensor | None  # (B, M, n, k_v)
    align_audio: Tensor | None  # (B * M, n, k) embeddings fed to the alignment loss
    align_visual: Tensor | None


def _blocks(rng, cfg: ModelConfig, width: int, count: int, dtype) -> list[MambaBlockParams]:
    return [
        init_block(
            rng,
            width,
            chunk_size=cfg.chunk_size,
            d_state=cfg.d_state,
            conv_kernel=cfg.conv_kernel,
            expand=cfg.expand,
            heads=cfg.heads,
            dropout=cfg.dropout,
            selective=cfg.selective,
            backend=cfg.backend,
            dtype=dtype,
        )
        for _ in range(count)
    ]


def _xattn(rng, k: int, cfg: ModelConfig, dtype) -> XAttnParams:
    return XAttnParams(
        init_attention(rng, k, cfg.heads, dtype),
        norm(k, dtype),
        FFNParams(affine(rng, k, cfg.expand * k, dtype), affine(rng, cfg.expand * k, k, dtype, gain=0.5)),
        norm(k, dtype),
    )


def init_model(cfg: ModelConfig, seed: int | None = None, dtype=np.float64) -> ModelParams:
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    d = cfg.d
    proj = {c: affine(rng, CUE_WIDTHS[c], d, dtype, gain=0.5) for c in CUE_NAMES}
    cue_enc = {c: _blocks(rng, cfg, d, 1, dtype)[0] for c in CUE_NAMES}
    if cfg.modality_fusion:
        audio = GroupStack(affine(rng, 2 * d, cfg.k_a, dtype), _blocks(rng, cfg, cfg.k_a, cfg.layers, dtype))
        visual = GroupStack(affine(rng, 3 * d, cfg.k_v, dtype), _blocks(rng, cfg, cfg.k_v, cfg.layers, dtype))
    else:
        audio = GroupStack(affine(rng, 5 * d, cfg.k_a, dtype), _blocks(rng, cfg, cfg.k_a, cfg.layers, dtype))
        visual = None
    ctx_a: list[MambaBlockParams] = []
    ctx_v: list[MambaBlockParams] = []
    xa = xv = None
    if cfg.partner_fusion:
        if not cfg.ctx_identity:
            ctx_a = _blocks(rng, cfg, cfg.k_a, cfg.ctx_layers, dtype)
            if visual is not None:
                ctx_v = _blocks(rng, cfg, cfg.k_v, cfg.ctx_layers, dtype)
        xa = _xattn(rng, cfg.k_a, cfg, dtype)
        xv = _xattn(rng, cfg.k_v, cfg, dtype) if visual is not None else None
    d_f = cfg.k_a + (cfg.k_v if visual is not None else 0)
    head = Head(affine(rng, d_f, d_f, dtype), affine(rng, d_f, 1, dtype, gain=0.5))
    align_proj = None
    if visual is not None and cfg.k_a != cfg.k_v:
        align_proj = affine(rng, cfg.k_v, cfg.k_a, dtype)
    return ModelParams(proj, cue_enc, audio, visual, ctx_a, ctx_v, xa, xv, norm(d_f, dtype), head, align_proj)


# -- operations ---------------------------------------------------------------------


def encode_group(group: Tensor, stack: GroupStack, rng=None, mask=None) -> Tensor:
    """Width projection then the L-block stack; frame count is preserved."""
    if group.shape[-1] != stack.in_proj.W.shape[0]:
        raise DimensionError(f"group width {group.shape[-1]} vs stack input {stack.in_proj.W.shape[0]}")
    x = apply_mask(T.linear(group, stack.in_proj.W, stack.in_proj.b), mask)
    return mamba_stack(x, stack.layers, rng, mask)


def assemble_partner_context(partners: list[GroupEmbeddings], target: str) -> PartnerContext:
    """Stack partners' embeddings along the frame axis, in list order."""
    if not partners:
        raise UsageError("partner context needs at least one partner (M >= 2)")
    if any(p.pid == target for p in partners):
        raise UsageError(f"target {target!r} must not be in its own partner list")
    frames = {p.pid: p.audio.shape[-2] for p in partners}
    if len(set(frames.values())) != 1:
        raise AlignmentError(f"partners disagree on frame count: {frames}")
    audio = T.concat([p.audio for p in partners], axis=-2)
    visual = None
    if partners[0].visual is not None:
        visual = T.concat([p.visual for p in partners], axis=-2)
    return PartnerContext(audio, visual, [p.pid for p in partners])


def encode_context(ctx: Tensor, layers: list[MambaBlockParams], rng=None, mask=None) -> Tensor:
    return mamba_stack(ctx, layers, rng, mask) if layers else ctx


def cross_attention_block(X: Tensor, ctx: Tensor, w: XAttnParams) -> Tensor:
    """Pre-norm residual cross-attention then pre-norm residual FFN."""
    if X.shape[-1] != ctx.shape[-1] or X.shape[-1] != w.attn.q.W.shape[0]:
        raise DimensionError(f"cross-attention widths: X {X.shape}, ctx {ctx.shape}, weights {w.attn.q.W.shape}")
    xh = X + cross_attention(T.layer_norm(X, w.norm1.gain, w.norm1.bias), ctx, w.attn)
    return xh + ffn(T.layer_norm(xh, w.norm2.gain, w.norm2.bias), w.ffn)


def fuse_and_predict(Xa: Tensor, Xv: Tensor | None, fuse_norm: Norm, head: Head, bounded: bool = True) -> Tensor:
    """LayerNorm([Xa | Xv]) then a two-layer per-frame MLP to one score."""
    if Xv is not None:
        if Xa.shape[:-1] != Xv.shape[:-1]:
            raise AlignmentError(f"modality outputs disagree on frames: {Xa.shape} vs {Xv.shape}")
        F = T.concat([Xa, Xv], axis=-1)
    else:
        F = Xa
    F = T.layer_norm(F, fuse_norm.gain, fuse_norm.bias)
    h = T.gelu(T.linear(F, head.hidden.W, head.hidden.b))
    y = T.linear(h, head.out.W, head.out.b)
    return T.sigmoid(y) if bounded else y


def forward_batch(
    cues: dict[str, np.ndarray],
    params: ModelParams,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    valid: np.ndarray | None = None,
) -> ForwardOutput:
    """Run the full network on aligned cues of shape (B, M, n, width) each.

    Participant 0 of every batch row is the target; the rest are partners
    in order. ``rng`` enables dropout (training mode). ``valid`` (B, n)
    marks real frames; padded frames are held at zero inside every stack,
    which keeps zero-variance rows from feeding layer-norm gradients.
    """
    B, M, n, _ = cues[CUE_NAMES[0]].shape
    if M < 2:
        raise UsageError("forward needs a target and at least one partner")
    mask = ctx_mask = None
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (B, n):
            raise DimensionError(f"valid mask {valid.shape} vs {(B, n)}")
        if not valid.all():
            mask = np.repeat(valid, M, axis=0)
            ctx_mask = np.tile(valid, (1, M - 1))
    enc = {}
    for c in CUE_NAMES:
        arr = cues[c]
        if arr.shape[:3] != (B, M, n):
            raise AlignmentError(f"cue {c}: leading shape {arr.shape[:3]} vs {(B, M, n)}")
        x = Tensor._wrap(np.ascontiguousarray(arr.reshape(B * M, n, arr.shape[-1])))
        enc[c] = apply_mask(encode_cue(apply_mask(project_cue(x, params.proj[c]), mask), params.cue_enc[c], rng), mask)
    if params.visual is not None:
        groups = build_modality_groups(enc)
        A = encode_group(groups.audio, params.audio, rng, mask)
        V = encode_group(groups.visual, params.visual, rng, mask)
    else:
        A = encode_group(T.concat([enc[c] for c in CUE_NAMES], axis=-1), params.audio, rng, mask)
        V = None

    ka = A.shape[-1]
    A4 = T.reshape(A, (B, M, n, ka))
    V4 = T.reshape(V, (B, M, n, V.shape[-1])) if V is not None else None
    Xa = A4[:, 0]
    Xv = V4[:, 0] if V4 is not None else None
    if cfg.partner_fusion:
        ctx_a = encode_context(T.reshape(A4[:, 1:], (B, (M - 1) * n, ka)), params.ctx_audio, rng, ctx_mask)
        Xa = cross_attention_block(Xa, ctx_a, params.xattn_audio)
        if V4 is not None:
            kv = V4.shape[-1]
            ctx_v = encode_context(T.reshape(V4[:, 1:], (B, (M - 1) * n, kv)), params.ctx_visual, rng, ctx_mask)
            Xv = cross_attention_block(Xv, ctx_v, params.xattn_visual)
    pred = fuse_and_predict(Xa, Xv, params.fuse_norm, params.head, cfg.bounded_head)

    al_a = al_v = None
    if V is not None:
        al_a, al_v = A, V
        if params.align_proj is not None:
            al_v = T.linear(V, params.align_proj.W, params.align_proj.b)
    return ForwardOutput(pred, A4, V4, al_a, al_v)


def session_arrays(session: Session, order: list[str], start: int = 0, stop: int | None = None, pad_to: int | None = None):
    """Aligned cues for participants in ``order``, frames [start, stop), zero-padded.

    Returns ``(cues, valid)`` where each cue is (1, M, L, width) and ``valid``
    marks real (non-padded) frames. ``start`` may be negative.
    """
    stop = session.n if stop is None else stop
    L = pad_to if pad_to is not None else stop - start
    lo, hi = max(start, 0), min(stop, session.n)
    off = lo - start
    out = {}
    for c in CUE_NAMES:
        buf = np.zeros((1, len(order), L, CUE_WIDTHS[c]))
        for j, pid in enumerate(order):
            buf[0, j, off : off + hi - lo] = session.aligned(pid)[c][lo:hi]
        out[c] = buf
    valid = np.zeros(L, dtype=bool)
    valid[off : off + hi - lo] = True
    return out, valid


def forward_session(session: Session, params: ModelParams, cfg: ModelConfig, target: str | None = None):
    """Whole-session forward for one target (eval mode).

    Returns ``(pred (n, 1), embeddings)`` where ``embeddings`` lists a
    :class:`GroupEmbeddings` per participant in session order.
    """
    target = session.target if target is None else target
    if target not in session.pids:
        raise UsageError(f"unknown target {target!r}; session has {session.pids}")
    order = [target] + [p for p in session.pids if p != target]
    cues, _ = session_arrays(session, order)
    out = forward_batch(cues, params, cfg)
    embs = {}
    for j, pid in enumerate(order):
        embs[pid] = GroupEmbeddings(
            out.audio[0, j], out.visual[0, j] if out.visual is not None else None, pid
        )
    return out.pred[0], [embs[p] for p in session.pids]


def check_config(params: ModelParams, cfg: ModelConfig) -> None:
    if params.proj[CUE_NAMES[0]].W.shape[1] != cfg.d:
        raise ConfigError("checkpoint projection width disagrees with model.d")
    if (params.visual is None) == cfg.modality_fusion:
        raise ConfigError("checkpoint modality_fusion setting disagrees with config")
