"""Time and peak-allocation scaling of the hybrid block against dense attention.

Peak allocation is the tracemalloc high-water mark, which numpy feeds with
every array buffer it allocates. It is measured in separate runs from the
timing so that tracing overhead never enters the medians. Configurations
that are compared against each other are timed round-robin. BLAS is pinned
to one thread when threadpoolctl is available.
"""

from __future__ import annotations

import contextlib
import csv
import gc
import logging
import math
import statistics
import time
import tracemalloc
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from damamba import kernels
from damamba import tensor as T
from damamba.block import (
    AttnParams,
    MambaBlockParams,
    _attend,
    init_block,
    mamba_block_forward,
    mamba_stack,
)
from damamba.config import ModelConfig
from damamba.model import _xattn, cross_attention_block
from damamba.params import param_count
from damamba.tensor import Tensor

log = logging.getLogger(__name__)

HYBRID = "hybrid"
FULL = "full-attention"
CONTEXT = "context"
OK, OOM = "ok", "oom"

CSV_FIELDS = ["variant", "n", "time_ms", "peak_bytes", "params", "status", "participants"]
RATIO_FIELDS = ["time_ratio", "peak_ratio"]


@dataclass
class BenchResult:
    variant: str
    n: int
    time_ms: float
    peak_bytes: int
    params: int
    status: str = OK
    participants: int = 1

    @property
    def oom(self) -> bool:
        return self.status == OOM


def _dtype(name: str):
    return {"f32": np.float32, "f64": np.float64}[name]


@contextlib.contextmanager
def single_thread():
    """Limit BLAS/OpenMP pools to one thread for the duration of the block."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # timing still works, just noisier on many-core hosts
        yield
        return
    with threadpool_limits(limits=1):
        yield


def measure_time(fn: Callable[[], object], repeats: int = 5, warmups: int = 2) -> float:
    """Median wall time in ms of ``repeats`` calls after ``warmups`` discarded calls."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmups):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def measure_times_interleaved(fns: Sequence[Callable[[], object]], repeats: int = 5, warmups: int = 2) -> list[float]:
    """Median ms per callable, timed round-robin so slow host periods hit every entry alike.

    Timing each configuration in its own block lets frequency drift or a busy
    neighbour land on one length only, which distorts ratios between lengths.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmups):
        for fn in fns:
            fn()
    times: list[list[float]] = [[] for _ in fns]
    for _ in range(repeats):
        for fn, acc in zip(fns, times):
            t0 = time.perf_counter()
            fn()
            acc.append((time.perf_counter() - t0) * 1e3)
    return [statistics.median(t) for t in times]


def measure_peak(fn: Callable[[], object]) -> int:
    """Bytes allocated above the starting level at the high-water mark of one call."""
    gc.collect()
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        tracemalloc.clear_traces()
        base, _ = tracemalloc.get_traced_memory()
        tracemalloc.reset_peak()
        out = fn()
        _, peak = tracemalloc.get_traced_memory()
        del out
    finally:
        if not was_tracing:
            tracemalloc.stop()
    return max(int(peak - base), 0)


# -- variants --------------------------------------------------------------------------


def full_attention_baseline_forward(X: Tensor, weights: MambaBlockParams | AttnParams) -> Tensor:
    """Dense self-attention over all n frames; the n x n scores are materialized.

    Given a block, runs the whole attention-only block (attention, residual,
    norm, FFN); given bare attention weights, only the attention mixing.
    """
    if isinstance(weights, AttnParams):
        Q = T.linear(X, weights.q.W, weights.q.b)
        K = T.linear(X, weights.k.W, weights.k.b)
        V = T.linear(X, weights.v.W, weights.v.b)
        return T.linear(_attend(Q, K, V, weights.heads), weights.o.W, weights.o.b)
    if weights.ssm is not None or weights.chunk_size is not None:
        raise ValueError("baseline weights must be an attention-only block")
    return mamba_block_forward(X, weights)


def score_bytes(n: int, span: int, heads: int, itemsize: int, batch: int = 1) -> int:
    """Size of the attention score tensor: one ``span``-wide row per frame and head."""
    return batch * heads * n * min(span, n) * itemsize


def _variant_block(variant: str, d: int, chunk_size: int, dtype, seed: int) -> MambaBlockParams:
    rng = np.random.default_rng(seed)
    if variant == HYBRID:
        return init_block(rng, d, chunk_size=chunk_size, dropout=0.0, dtype=dtype)
    if variant == FULL:
        return init_block(rng, d, backend="attention", dropout=0.0, dtype=dtype)
    raise ValueError(f"unknown variant {variant!r}")


def _prepare_variant(variant, n, d, chunk_size, cap_bytes, dt, seed):
    """Return (row, run): row is final (OOM) when run is None, else holds the peak."""
    block = _variant_block(variant, d, chunk_size, dt, seed)
    params = param_count(block)
    span = chunk_size if variant == HYBRID else n
    oom = BenchResult(variant, n, math.nan, 0, params, OOM)
    if cap_bytes and score_bytes(n, span, block.attn.heads, np.dtype(dt).itemsize) > cap_bytes:
        return oom, None  # refuse before allocating
    X = Tensor(np.random.default_rng(seed + 1).normal(size=(1, n, d)).astype(dt))

    def run():
        with T.no_grad():
            if variant == FULL:
                return full_attention_baseline_forward(X, block)
            return mamba_block_forward(X, block)

    try:
        peak = measure_peak(run)
    except MemoryError:
        return oom, None
    if cap_bytes and peak > cap_bytes:
        return BenchResult(variant, n, math.nan, peak, params, OOM), None
    return BenchResult(variant, n, math.nan, peak, params), run


def bench_variant(
    variant: str,
    n: int,
    *,
    d: int = 32,
    chunk_size: int = 32,
    repeats: int = 5,
    warmups: int = 2,
    cap_bytes: int = 0,
    dtype="f32",
    seed: int = 0,
) -> BenchResult:
    """One (variant, n) row: eval-mode forward of a single block, batch 1."""
    dt = _dtype(dtype) if isinstance(dtype, str) else dtype
    row, run = _prepare_variant(variant, n, d, chunk_size, cap_bytes, dt, seed)
    if run is not None:
        try:
            row.time_ms = measure_time(run, repeats, warmups)
        except MemoryError:
            return BenchResult(variant, n, math.nan, 0, row.params, OOM)
    return row


def run_scaling_benchmark(
    lengths: Sequence[int] = (256, 512, 1024, 2048),
    d: int = 32,
    chunk_size: int = 32,
    repeats: int = 5,
    *,
    warmups: int = 2,
    cap_bytes: int = 0,
    variants: Sequence[str] = (HYBRID, FULL),
    dtype: str = "f32",
    seed: int = 0,
) -> list[BenchResult]:
    """One row per (variant, n); lengths must be ascending.

    Peaks are measured one configuration at a time; wall times are taken
    round-robin over all lengths of a variant.
    """
    lengths = [int(n) for n in lengths]
    if lengths != sorted(lengths):
        raise ValueError(f"lengths must be sorted ascending, got {lengths}")
    dt = _dtype(dtype)
    rows = []
    with single_thread():
        for variant in variants:
            prepared = [_prepare_variant(variant, n, d, chunk_size, cap_bytes, dt, seed) for n in lengths]
            live = [(row, run) for row, run in prepared if run is not None]
            try:
                times = measure_times_interleaved([run for _, run in live], repeats, warmups)
            except MemoryError:
                times = None
            for (row, _), ms in zip(live, times or [math.nan] * len(live)):
                row.time_ms = ms
                if times is None:
                    row.status = OOM
            for row, _ in prepared:
                log.info("%s n=%d %s %.2f ms peak %d B", variant, row.n, row.status, row.time_ms, row.peak_bytes)
                rows.append(row)
    return rows


def partner_scaling_benchmark(
    participants: Sequence[int] = (2, 3, 5),
    n: int = 512,
    *,
    k: int = 32,
    ctx_layers: int = 4,
    chunk_size: int = 32,
    repeats: int = 5,
    warmups: int = 2,
    dtype: str = "f32",
    seed: int = 0,
) -> list[BenchResult]:
    """Wall time of the partner-context path (context stack + cross-attention) per M.

    The context holds (M-1) * n frames, so time should grow with M - 1.
    """
    if any(m < 2 for m in participants):
        raise ValueError("partner scaling needs M >= 2")
    dt = _dtype(dtype)
    rng = np.random.default_rng(seed)
    layers = [init_block(rng, k, chunk_size=chunk_size, dropout=0.0, dtype=dt) for _ in range(ctx_layers)]
    xattn = _xattn(rng, k, ModelConfig(chunk_size=chunk_size), dt)
    params = param_count(layers) + param_count(xattn)
    data = np.random.default_rng(seed + 1)
    X = Tensor(data.normal(size=(1, n, k)).astype(dt))
    def make_run(ctx):
        def run():
            with T.no_grad():
                return cross_attention_block(X, mamba_stack(ctx, layers), xattn)
        return run

    runs = [make_run(Tensor(data.normal(size=(1, (M - 1) * n, k)).astype(dt))) for M in participants]
    with single_thread():
        peaks = [measure_peak(run) for run in runs]
        times = measure_times_interleaved(runs, repeats, warmups)
    rows = []
    for M, ms, peak in zip(participants, times, peaks):
        log.info("context M=%d %.2f ms", M, ms)
        rows.append(BenchResult(CONTEXT, n, ms, peak, params, OK, M))
    return rows


def kernel_benchmark(
    lengths: Sequence[int] = (256, 1024, 4096),
    features: int = 512,
    repeats: int = 5,
    warmups: int = 2,
) -> list[BenchResult]:
    """Forward linear-scan time for each available kernel backend."""
    rng = np.random.default_rng(0)
    a = rng.uniform(0.5, 0.99, features)
    backends = ["python"] + (["compiled"] if kernels.HAVE_COMPILED else [])
    prev = kernels.BACKEND
    rows = []
    try:
        with single_thread():
            for name in backends:
                kernels.set_backend(name)
                for n in lengths:
                    u = rng.normal(size=(1, n, features))
                    ms = measure_time(lambda: kernels.linear_scan(a, u), repeats, warmups)
                    rows.append(BenchResult(f"scan-{name}", n, ms, 0, 0))
    finally:
        kernels.set_backend(prev)
    return rows


# -- reporting ---------------------------------------------------------------------------------


def ratios(rows: Sequence[BenchResult]) -> list[dict[str, float]]:
    """time(2n)/time(n) style ratios against the previous row of the same series.

    The first row of each variant, and any row next to an OOM, gets NaN.
    """
    out = []
    prev: dict[str, BenchResult] = {}
    for r in rows:
        p = prev.get(r.variant)
        if p is None or p.oom or r.oom:
            out.append({"time_ratio": math.nan, "peak_ratio": math.nan})
        else:
            out.append({
                "time_ratio": r.time_ms / p.time_ms,
                "peak_ratio": r.peak_bytes / p.peak_bytes if p.peak_bytes else math.nan,
            })
        prev[r.variant] = r
    return out


def ratio_between(rows: Sequence[BenchResult], variant: str, n_small: int, n_large: int, attr: str = "time_ms") -> float:
    by_n = {r.n: r for r in rows if r.variant == variant and not r.oom}
    return getattr(by_n[n_large], attr) / getattr(by_n[n_small], attr)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(rows: Sequence[BenchResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS + RATIO_FIELDS)
        for r, rat in zip(rows, ratios(rows)):
            w.writerow([_fmt(getattr(r, f)) for f in CSV_FIELDS] + [_fmt(rat[f]) for f in RATIO_FIELDS])


def read_csv(path: str | Path) -> list[BenchResult]:
    types = {f.name: f.type for f in fields(BenchResult)}
    conv = {"int": int, "float": float, "str": str}
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(BenchResult(**{k: conv[types[k]](rec[k]) for k in CSV_FIELDS}))
    return rows


def format_table(rows: Sequence[BenchResult]) -> str:
    lines = [f"{'variant':<16}{'M':>3}{'n':>7}{'time_ms':>11}{'peak_bytes':>13}{'params':>9}{'t_ratio':>9}{'m_ratio':>9}"]
    for r, rat in zip(rows, ratios(rows)):
        t = "OOM" if r.oom else f"{r.time_ms:.3f}"
        lines.append(
            f"{r.variant:<16}{r.participants:>3}{r.n:>7}{t:>11}{r.peak_bytes:>13}{r.params:>9}"
            f"{rat['time_ratio']:>9.2f}{rat['peak_ratio']:>9.2f}"
        )
    return "\n".join(lines)
