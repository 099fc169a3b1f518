import numpy as np
import pytest

from damamba import tensor as T
from damamba.config import Config
from damamba.errors import AlignmentError, ConfigError, DimensionError, UsageError
from damamba.features import CUE_NAMES, CUE_WIDTHS, generate_synthetic_session
from damamba.model import (
    GroupEmbeddings,
    assemble_partner_context,
    check_config,
    cross_attention_block,
    forward_batch,
    forward_session,
    init_model,
    session_arrays,
)
from damamba.params import named_parameters, param_count
from damamba.tensor import Tensor
from damamba.training import batch_losses, make_batch, make_windows

from conftest import tiny_model_config
from oracles import model_grad_check, numpy_cross_attention


def random_cues(rng, B, M, n):
    return {c: rng.normal(size=(B, M, n, CUE_WIDTHS[c])) for c in CUE_NAMES}


def test_forward_shapes(rng):
    cfg = tiny_model_config(k_a=6, k_v=5)
    params = init_model(cfg)
    out = forward_batch(random_cues(rng, 2, 3, 9), params, cfg)
    assert out.pred.shape == (2, 9, 1)
    assert out.audio.shape == (2, 3, 9, 6) and out.visual.shape == (2, 3, 9, 5)
    # unequal group widths route the visual side through the shared alignment projection
    assert out.align_audio.shape == (6, 9, 6) and out.align_visual.shape == (6, 9, 6)
    assert np.all((out.pred.data > 0) & (out.pred.data < 1))


@pytest.mark.parametrize("M", [2, 3, 4])
def test_partner_context_shape(M):
    cfg = tiny_model_config(k_a=6, k_v=5)
    params = init_model(cfg)
    s = generate_synthetic_session(M, M, 12)
    pred, embs = forward_session(s, params, cfg)
    assert pred.shape == (12, 1)
    ctx = assemble_partner_context([e for e in embs if e.pid != s.target], s.target)
    assert ctx.audio_ctx.shape == ((M - 1) * 12, 6)
    assert ctx.visual_ctx.shape == ((M - 1) * 12, 5)
    assert ctx.order == s.pids[1:]


def test_partner_context_errors():
    e = GroupEmbeddings(Tensor(np.zeros((4, 3))), None, "p1")
    with pytest.raises(UsageError):
        assemble_partner_context([], "p0")
    with pytest.raises(UsageError):
        assemble_partner_context([e], "p1")
    with pytest.raises(AlignmentError):
        assemble_partner_context([e, GroupEmbeddings(Tensor(np.zeros((5, 3))), None, "p2")], "p0")


def test_context_preserves_partner_order_along_frames():
    a = GroupEmbeddings(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))), "p1")
    b = GroupEmbeddings(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))), "p2")
    ctx = assemble_partner_context([a, b], "p0")
    assert np.array_equal(ctx.audio_ctx.data[:, 0], [0, 0, 1, 1])
    assert np.array_equal(ctx.visual_ctx.data[:, 0], [0, 0, 1, 1])


def test_partner_permutation_invariance_with_identity_context(rng):
    cfg = tiny_model_config(ctx_identity=True)
    params = init_model(cfg)
    cues = random_cues(rng, 1, 4, 10)
    perm = {c: v[:, [0, 3, 1, 2]] for c, v in cues.items()}
    a = forward_batch(cues, params, cfg).pred.data
    b = forward_batch(perm, params, cfg).pred.data
    assert np.allclose(a, b, atol=1e-12)


def test_partners_influence_the_target(rng):
    cfg = tiny_model_config()
    params = init_model(cfg)
    cues = random_cues(rng, 1, 2, 10)
    other = {c: v.copy() for c, v in cues.items()}
    for v in other.values():
        v[:, 1] = rng.normal(size=v[:, 1].shape)
    assert not np.allclose(forward_batch(cues, params, cfg).pred.data, forward_batch(other, params, cfg).pred.data)
    off = tiny_model_config(partner_fusion=False)
    p_off = init_model(off)
    assert np.array_equal(forward_batch(cues, p_off, off).pred.data, forward_batch(other, p_off, off).pred.data)


def test_cross_attention_matches_numpy(rng):
    cfg = tiny_model_config()
    w = init_model(cfg).xattn_audio
    X, ctx = rng.normal(size=(5, 4)), rng.normal(size=(9, 4))
    at = w.attn

    def ln(x, n):
        mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * n.gain.data + n.bias.data

    args = [t.data for t in (at.q.W, at.q.b, at.k.W, at.k.b, at.v.W, at.v.b, at.o.W, at.o.b)]
    xh = X + numpy_cross_attention(ln(X, w.norm1), ctx, *args)
    hdn = ln(xh, w.norm2) @ w.ffn.up.W.data + w.ffn.up.b.data
    gelu = 0.5 * hdn * (1 + np.tanh(np.sqrt(2 / np.pi) * (hdn + 0.044715 * hdn**3)))
    want = xh + gelu @ w.ffn.down.W.data + w.ffn.down.b.data
    got = cross_attention_block(Tensor(X), Tensor(ctx), w).data
    assert np.max(np.abs(got - want)) < 1e-12


def test_cross_attention_zero_value_path_is_identity_plus_ffn(rng):
    w = init_model(tiny_model_config()).xattn_audio
    for t in (w.attn.v.W, w.attn.v.b, w.attn.o.W, w.attn.o.b, w.ffn.down.W, w.ffn.down.b):
        t.data[...] = 0.0
    X = rng.normal(size=(6, 4))
    assert np.array_equal(cross_attention_block(Tensor(X), Tensor(rng.normal(size=(3, 4))), w).data, X)


def test_cross_attention_width_error(rng):
    w = init_model(tiny_model_config()).xattn_audio
    with pytest.raises(DimensionError):
        cross_attention_block(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))), w)


def test_forward_needs_partner_and_aligned_cues(rng):
    cfg = tiny_model_config()
    params = init_model(cfg)
    with pytest.raises(UsageError):
        forward_batch(random_cues(rng, 1, 1, 5), params, cfg)
    cues = random_cues(rng, 1, 2, 5)
    cues["of"] = cues["of"][:, :, :4]
    with pytest.raises(AlignmentError):
        forward_batch(cues, params, cfg)


def test_ablation_flags_change_parameter_tree():
    full = init_model(tiny_model_config())
    no_mod = init_model(tiny_model_config(modality_fusion=False))
    no_partner = init_model(tiny_model_config(partner_fusion=False))
    ident = init_model(tiny_model_config(ctx_identity=True))
    assert no_mod.visual is None and no_mod.ctx_visual == [] and no_mod.xattn_visual is None
    assert no_partner.xattn_audio is None and no_partner.ctx_audio == []
    assert ident.ctx_audio == [] and ident.xattn_audio is not None
    counts = [param_count(p) for p in (full, no_mod, no_partner, ident)]
    assert counts[0] > max(counts[1:])


def test_single_stream_model_runs_without_alignment(rng):
    cfg = tiny_model_config(modality_fusion=False)
    out = forward_batch(random_cues(rng, 1, 2, 6), init_model(cfg), cfg)
    assert out.pred.shape == (1, 6, 1) and out.visual is None and out.align_audio is None


def test_init_is_seeded():
    cfg = tiny_model_config()
    a, b, c = init_model(cfg, 3), init_model(cfg, 3), init_model(cfg, 4)
    pa, pb, pc = (dict(named_parameters(x)) for x in (a, b, c))
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)
    assert not all(np.array_equal(pa[k].data, pc[k].data) for k in pa)


def test_padding_mask_zeroes_padded_frames(rng):
    cfg = tiny_model_config()
    params = init_model(cfg)
    cues = random_cues(rng, 2, 2, 8)
    valid = np.ones((2, 8), dtype=bool)
    valid[1, 5:] = False
    out = forward_batch(cues, params, cfg, valid=valid)
    assert np.all(out.audio.data[1, :, 5:] == 0) and np.all(out.visual.data[1, :, 5:] == 0)
    assert np.any(out.audio.data[0, :, 5:] != 0)
    # the fully valid row is untouched by the other row's padding
    alone = forward_batch({c: v[:1] for c, v in cues.items()}, params, cfg)
    assert np.allclose(out.pred.data[0], alone.pred.data[0], atol=1e-12)
    with pytest.raises(DimensionError):
        forward_batch(cues, params, cfg, valid=valid[:, :4])


def test_session_arrays_padding():
    s = generate_synthetic_session(0, 2, 10)
    cues, valid = session_arrays(s, s.pids, start=-3, stop=5, pad_to=8)
    assert cues["ege"].shape == (1, 2, 8, 88)
    assert valid.tolist() == [False] * 3 + [True] * 5
    assert np.all(cues["ege"][0, :, :3] == 0)
    assert np.array_equal(cues["ege"][0, 1, 3:], s.aligned("p1")["ege"][:5])


def test_check_config():
    params = init_model(tiny_model_config())
    check_config(params, tiny_model_config())
    with pytest.raises(ConfigError):
        check_config(params, tiny_model_config(d=8))
    with pytest.raises(ConfigError):
        check_config(params, tiny_model_config(modality_fusion=False))


def _loss_setup(seed, n=8, selective=False):
    cfg = Config()
    cfg.model = tiny_model_config(selective=selective, heads=2)
    cfg.train.negatives = 0
    params = init_model(cfg.model, seed)
    s = generate_synthetic_session(seed, 2, n)
    batch = make_batch([(s, "p0", make_windows(n, n, n)[0]), (s, "p1", make_windows(n, n, n)[0])])

    def loss():
        return batch_losses(forward_batch(batch.cues, params, cfg.model, None, batch.valid), batch, cfg)[2]

    return loss, params


def test_every_parameter_receives_gradient():
    loss, params = _loss_setup(0)
    _, _, dead = model_grad_check(loss, params, per_tensor=0)
    # softmax is invariant to a key bias (it adds q . b_k to every score in a row)
    assert [n for n in dead if not n.endswith("k.b")] == []


@pytest.mark.parametrize("seed", [0, 1])
def test_end_to_end_gradient_check(seed):
    loss, params = _loss_setup(seed, selective=bool(seed % 2))
    worst, checked, _ = model_grad_check(loss, params, per_tensor=2, seed=seed)
    assert checked > 100 and worst < 1e-3
