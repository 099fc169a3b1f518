"""The ten acceptance criteria, each at its stated tolerance.

Every criterion prints one ``criterion N ... PASS|FAIL`` line (shown inline
in ``pytest -v`` output and repeated in the terminal summary).
"""

import contextlib
import math
import time

import numpy as np
import pytest

from damamba import bench as B
from damamba import kernels
from damamba.block import chunked_local_attention, full_attention, init_block, mamba_stack
from damamba.config import Config, synthetic_benchmark_config
from damamba.features import benchmark_sessions, generate_synthetic_session
from damamba.losses import AlignmentConfig, LossWeights, ccc, infonce_alignment_loss, total_loss
from damamba.model import assemble_partner_context, forward_session, init_model
from damamba.ssm import dense_from_diagonal, ssm_scan, ssm_scan_naive
from damamba.tensor import Tensor, finite_diff_check
from damamba.training import evaluate, load_checkpoint, make_windows, train

from conftest import tiny_model_config
from oracles import model_grad_check, op_cases, ridge_probe
from test_model import _loss_setup
from test_ssm_block import random_ssm

RESULTS: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    @contextlib.contextmanager
    def run(number, title):
        info = {}
        t0 = time.perf_counter()
        try:
            yield info
        except BaseException:
            line = f"criterion {number:>2} {title}: FAIL ({time.perf_counter() - t0:.1f} s) {info}"
            RESULTS[number] = line
            _emit(reporter, line)
            raise
        line = f"criterion {number:>2} {title}: PASS ({time.perf_counter() - t0:.1f} s) {info}"
        RESULTS[number] = line
        _emit(reporter, line)

    return run


def _emit(reporter, line):
    print(line)
    if reporter is not None:
        reporter.write_line("")
        reporter.write_line(line)


# -- 1 -------------------------------------------------------------------------------------


def test_criterion_01_gradient_integrity(criterion):
    with criterion(1, "gradient integrity") as info:
        t0 = time.perf_counter()
        worst_op, worst_name = 0.0, ""
        for seed in range(10):
            for name, (f, x) in op_cases(np.random.default_rng(seed)).items():
                err = finite_diff_check(f, x)
                if err > worst_op:
                    worst_op, worst_name = err, name
        worst_e2e, entries = 0.0, 0
        for seed in range(10):
            loss, params = _loss_setup(seed, n=8)
            err, checked, _ = model_grad_check(loss, params, per_tensor=1, seed=seed)
            worst_e2e, entries = max(worst_e2e, err), entries + checked
        elapsed = time.perf_counter() - t0
        info.update(ops=f"{worst_op:.1e} ({worst_name})", end_to_end=f"{worst_e2e:.1e} over {entries} entries")
        assert worst_op < 1e-4
        assert worst_e2e < 1e-3
        assert elapsed < 60


# -- 2 -------------------------------------------------------------------------------------


def test_criterion_02_ssm_oracle(criterion):
    with criterion(2, "SSM oracle equivalence") as info:
        t0 = time.perf_counter()
        worst = 0.0
        backends = ["python"] + (["compiled"] if kernels.HAVE_COMPILED else [])
        prev = kernels.BACKEND
        try:
            for backend in backends:
                kernels.set_backend(backend)
                rng = np.random.default_rng(2)
                for _ in range(20):
                    n, d, N = int(rng.integers(1, 257)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
                    ssm = random_ssm(rng, d, N, bool(rng.integers(0, 2)), n)
                    x = rng.normal(size=(n, d))
                    ref = ssm_scan_naive(x, *dense_from_diagonal(ssm))
                    worst = max(worst, float(np.max(np.abs(ssm_scan(Tensor(x), ssm).data - ref))))
        finally:
            kernels.set_backend(prev)
        info.update(max_abs=f"{worst:.1e}", backends=backends)
        assert worst <= 1e-8
        assert time.perf_counter() - t0 < 10


# -- 3 -------------------------------------------------------------------------------------


def test_criterion_03_attention_degeneracy(criterion):
    with criterion(3, "attention degeneracy") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(3)
        full_err = self_err = 0.0
        for _ in range(10):
            n, heads = int(rng.integers(1, 80)), int(rng.choice([1, 2, 4]))
            attn = init_block(rng, 8, heads=heads).attn
            X = Tensor(rng.normal(size=(2, n, 8)))
            full_err = max(full_err, float(np.max(np.abs(chunked_local_attention(X, attn, n).data - full_attention(X, attn).data))))
            # a one-frame chunk attends only to itself: softmax weight 1 on its own value
            own = (X.data @ attn.v.W.data + attn.v.b.data) @ attn.o.W.data + attn.o.b.data
            self_err = max(self_err, float(np.max(np.abs(chunked_local_attention(X, attn, 1).data - own))))
        info.update(s_eq_n=f"{full_err:.1e}", s_eq_1=f"{self_err:.1e}")
        assert full_err <= 1e-10
        assert self_err <= 1e-12
        assert time.perf_counter() - t0 < 5


# -- 4 -------------------------------------------------------------------------------------


def test_criterion_04_causality(criterion):
    with criterion(4, "stack causality") as info:
        rng = np.random.default_rng(4)
        checked = 0
        for _ in range(50):
            n = int(rng.integers(2, 97))
            s = int(rng.integers(1, n + 1))
            t = int(rng.integers(0, n - 1))
            layers = [init_block(rng, 8, chunk_size=s, d_state=4, heads=2) for _ in range(4)]
            x = rng.normal(size=(1, n, 8))
            x_cut = x.copy()
            x_cut[:, t + 1 :] = 0.0
            bound = ((t + 1) // s) * s  # frames in chunks that end at or before t
            a = mamba_stack(Tensor(x), layers).data
            b = mamba_stack(Tensor(x_cut), layers).data
            assert np.array_equal(a[:, :bound], b[:, :bound]), (n, s, t)
            checked += 1
        info.update(triples=checked)


# -- 5 -------------------------------------------------------------------------------------


def test_criterion_05_shape_contracts(criterion):
    with criterion(5, "shape contracts") as info:
        rng = np.random.default_rng(5)
        for i in range(20):
            M = int(rng.choice([2, 3, 4]))
            n = int(rng.integers(4, 40))
            cfg = tiny_model_config(
                d=int(rng.integers(2, 7)), k_a=int(rng.integers(2, 9)), k_v=int(rng.integers(2, 9)),
                chunk_size=int(rng.integers(1, 9)), heads=1,
            )
            s = generate_synthetic_session(i, M, n)
            pred, embs = forward_session(s, init_model(cfg, i), cfg)
            ctx = assemble_partner_context([e for e in embs if e.pid != s.target], s.target)
            assert ctx.audio_ctx.shape == ((M - 1) * n, cfg.k_a)
            assert ctx.visual_ctx.shape == ((M - 1) * n, cfg.k_v)
            assert pred.shape == (n, 1)
        info.update(configs=20)


# -- 6 -------------------------------------------------------------------------------------

SCALING_LENGTHS = (256, 512, 1024, 2048)
OOM_CAP = 32 << 20  # bytes


def test_criterion_06_scaling(criterion):
    with criterion(6, "scaling reproduction") as info:
        t0 = time.perf_counter()
        rows = B.run_scaling_benchmark(SCALING_LENGTHS, d=32, chunk_size=32, repeats=5)
        print("\n" + B.format_table(rows))
        hyb_t = [B.ratio_between(rows, B.HYBRID, n // 2, n) for n in SCALING_LENGTHS if n >= 512]
        hyb_m = [B.ratio_between(rows, B.HYBRID, n // 2, n, "peak_bytes") for n in SCALING_LENGTHS if n >= 512]
        full_t = [B.ratio_between(rows, B.FULL, n // 2, n) for n in SCALING_LENGTHS if n >= 1024]
        full_m = [B.ratio_between(rows, B.FULL, n // 2, n, "peak_bytes") for n in SCALING_LENGTHS if n >= 1024]
        capped = B.run_scaling_benchmark([2048], d=32, chunk_size=32, repeats=1, warmups=0, cap_bytes=OOM_CAP)
        status = {r.variant: r.status for r in capped}
        info.update(
            hybrid_time=[round(r, 2) for r in hyb_t], hybrid_peak=[round(r, 2) for r in hyb_m],
            full_time=[round(r, 2) for r in full_t], full_peak=[round(r, 2) for r in full_m], capped=status,
        )
        assert max(hyb_t) <= 2.6 and max(hyb_m) <= 2.4
        assert min(full_t) >= 3.2 and min(full_m) >= 3.3
        assert status == {B.HYBRID: B.OK, B.FULL: B.OOM}
        assert time.perf_counter() - t0 < 300


# -- 7 -------------------------------------------------------------------------------------


def test_criterion_07_partner_scaling(criterion):
    with criterion(7, "partner scaling") as info:
        rows = B.partner_scaling_benchmark((2, 3, 5), 512, k=32, ctx_layers=4, repeats=5)
        t = {r.participants: r.time_ms for r in rows}
        # M - 1 doubles from 1 to 2 and from 2 to 4
        rs = [t[3] / t[2], t[5] / t[3]]
        info.update(ratios=[round(r, 2) for r in rs], ms={m: round(v, 1) for m, v in t.items()})
        assert all(1.6 <= r <= 2.6 for r in rs)


# -- 8 -------------------------------------------------------------------------------------


def test_criterion_08_learning_signal(criterion, tmp_path):
    with criterion(8, "learning signal") as info:
        t0 = time.perf_counter()
        cfg = synthetic_benchmark_config()
        train_s, held = benchmark_sessions(cfg.data)
        probe = ridge_probe(train_s, held)
        const = evaluate(None, cfg, held, predictor=lambda s, target: np.full(s.n, 0.5)).macro
        result = train(cfg, train_s, held, tmp_path)
        elapsed = time.perf_counter() - t0
        info.update(
            held_out=round(result.best_val_ccc, 4), probe=round(probe, 4), constant=const,
            epochs=cfg.train.epochs, minutes=round(elapsed / 60, 1),
        )
        assert cfg.train.epochs <= 50
        assert probe >= 0.6
        assert abs(const) <= 1e-6
        assert result.best_val_ccc >= 0.8 and result.best_val_ccc > probe
        assert elapsed < 15 * 60


# -- 9 -------------------------------------------------------------------------------------


def test_criterion_09_loss_units(criterion):
    with criterion(9, "loss unit cases") as info:
        rng = np.random.default_rng(9)
        y = rng.normal(size=100)
        assert ccc(y, y).item() == pytest.approx(1.0, abs=1e-12)
        s2 = y.var()
        shift_err = max(abs(ccc(y + c, y).item() - 2 * s2 / (2 * s2 + c * c)) for c in (0.1, 0.7, 3.0))
        assert shift_err < 1e-12
        nce_err = 0.0
        for n in (2, 4, 8, 16):
            a = Tensor(np.ones((1, n, 6)))
            nce_err = max(nce_err, abs(infonce_alignment_loss(a, a, AlignmentConfig()).item() - math.log(1 + (n - 1))))
        assert nce_err <= 1e-9
        l_ccc, l_align = 0.3125, 0.8125  # dyadic, so the weighted sum has one exact answer
        got = total_loss(Tensor(np.array(l_ccc)), Tensor(np.array(l_align)), LossWeights(1.0, 0.4)).item()
        assert got == 1.0 * l_ccc + 0.4 * l_align
        default = Config().train
        assert (default.lambda_ccc, default.lambda_align) == (1.0, 0.4)
        info.update(shift=f"{shift_err:.1e}", infonce=f"{nce_err:.1e}")


# -- 10 ------------------------------------------------------------------------------------


def test_criterion_10_determinism_and_persistence(criterion, tmp_path):
    with criterion(10, "determinism and persistence") as info:
        cfg = Config()
        cfg.model = tiny_model_config()
        cfg.train.epochs, cfg.train.batch_windows, cfg.train.lr, cfg.train.warmup_steps = 2, 4, 1e-3, 2
        tr = [generate_synthetic_session(i, 2, 40) for i in range(2)]
        va = [generate_synthetic_session(50 + i, 2, 40) for i in range(2)]
        res = train(cfg, tr, va, tmp_path / "a")
        train(cfg, tr, va, tmp_path / "b")
        same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert same
        params, cfg2, _, _ = load_checkpoint(tmp_path / "a" / "best")
        reloaded = evaluate(params, cfg2, va).macro
        assert reloaded == res.best_val_ccc
        for n in range(1, 301):
            cover = np.zeros(n, dtype=int)
            for w in make_windows(n):
                cover[w.central_start : w.central_stop] += 1
            assert np.all(cover == 1), n
        info.update(metrics_identical=same, val_ccc=res.best_val_ccc)
