"""Windowing, AdamW, warmup-cosine schedule, clipping, EMA, checkpoints, evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from damamba import params as P
from damamba import tensor as T
from damamba.config import Config, from_dict, save as save_config
from damamba.errors import DataError, DivergenceError, UsageError
from damamba.features import CUE_NAMES, Session
from damamba.losses import AlignmentConfig, LossWeights, ccc, ccc_numpy, infonce_alignment_loss, total_loss
from damamba.model import ModelParams, forward_batch, init_model, session_arrays

log = logging.getLogger(__name__)

CONTEXT = 32
METRICS_FIELDS = ["step", "lr", "loss_ccc", "loss_align", "loss_total", "val_ccc"]


# -- windows --------------------------------------------------------------------------


@dataclass(frozen=True)
class Window:
    """A 96-frame slice whose middle 32 frames receive predictions."""

    start: int  # first frame of the window (may be negative: zero-padded)
    central_start: int
    central_stop: int  # exclusive, clipped to the session length
    length: int = 96
    central: int = 32

    def valid(self, n: int) -> np.ndarray:
        idx = self.start + np.arange(self.length)
        return (idx >= 0) & (idx < n)

    def central_mask(self, n: int) -> np.ndarray:
        idx = self.start + np.arange(self.length)
        return (idx >= self.central_start) & (idx < self.central_stop)


def make_windows(n: int, window: int = 96, central: int = 32) -> list[Window]:
    """Central regions tile [0, n) with stride ``central``; context is zero-padded."""
    if n < 1:
        raise DataError(f"session length must be >= 1, got {n}")
    ctx = (window - central) // 2
    return [
        Window(c0 - ctx, c0, min(c0 + central, n), window, central) for c0 in range(0, n, central)
    ]


# -- optimization primitives -------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def optimizer_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    decay_mask: Sequence[bool] | None = None,
) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    if len(params) != len(grads):
        raise UsageError("params and grads differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; optimizer step rejected")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise UsageError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        if weight_decay and (decay_mask is None or decay_mask[i]):
            p *= 1.0 - lr * weight_decay
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        p -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)


def lr_schedule(step: int, lr: float, warmup_steps: int, total_steps: int, lr_min: float | None = None) -> float:
    """Linear warmup from 0 to ``lr``, then cosine decay to ``lr_min`` at ``total_steps``."""
    lr_min = lr / 100 if lr_min is None else lr_min
    if warmup_steps > 0 and step < warmup_steps:
        return lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float = 5.0) -> tuple[list[np.ndarray], float]:
    """Scale all gradients jointly so their global l2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm <= max_norm or norm == 0.0:
        return list(grads), norm
    s = max_norm / norm
    return [g * s for g in grads], norm


def ema_update(shadow: Sequence[np.ndarray], params: Sequence[np.ndarray], decay: float = 0.999):
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    for s, p in zip(shadow, params):
        if s.shape != p.shape:
            raise UsageError(f"EMA shape mismatch {s.shape} vs {p.shape}")
        s *= decay
        s += (1.0 - decay) * p
    return shadow


# -- batches ------------------------------------------------------------------------------


@dataclass
class Batch:
    cues: dict[str, np.ndarray]  # (B, M, L, width)
    labels: np.ndarray  # (B, L)
    valid: np.ndarray  # (B, L)
    central: np.ndarray  # (B, L)


def _order(session: Session, target: str) -> list[str]:
    return [target] + [p for p in session.pids if p != target]


def make_batch(items: Sequence[tuple[Session, str, Window]]) -> Batch:
    Ms = {s.M for s, _, _ in items}
    if len(Ms) != 1:
        raise UsageError(f"a batch needs one participant count, got {sorted(Ms)}")
    cues = {c: [] for c in CUE_NAMES}
    labels, valid, central = [], [], []
    for s, target, w in items:
        arrs, v = session_arrays(s, _order(s, target), w.start, w.start + w.length, pad_to=w.length)
        for c in CUE_NAMES:
            cues[c].append(arrs[c][0])
        lab = np.zeros(w.length)
        lab[v] = s.label(target)[max(w.start, 0) : max(w.start, 0) + int(v.sum())]
        labels.append(lab)
        valid.append(v)
        central.append(w.central_mask(s.n))
    return Batch({c: np.stack(x) for c, x in cues.items()}, np.stack(labels), np.stack(valid), np.stack(central))


def batch_losses(
    out,
    batch: Batch,
    cfg: Config,
    rng: np.random.Generator | None = None,
):
    """Return (ccc_loss, align_loss or None, total) tensors for one batch."""
    t = cfg.train
    pred = T.reshape(out.pred, out.pred.shape[:-1])
    if t.ccc_scope == "window":
        parts = [
            ccc(pred[b], batch.labels[b], batch.central[b].astype(float)) for b in range(pred.shape[0])
        ]
        acc = parts[0]
        for p in parts[1:]:
            acc = acc + p
        l_ccc = T.add_scalar(T.scale(acc, -1.0 / len(parts)), 1.0)
    else:
        l_ccc = T.add_scalar(T.scale(ccc(pred, batch.labels, batch.central.astype(float)), -1.0), 1.0)
    l_align = None
    if t.lambda_align > 0 and out.align_audio is not None:
        M = out.audio.shape[1]
        valid = np.repeat(batch.valid, M, axis=0)
        negs = "all" if t.negatives == 0 else t.negatives
        l_align = infonce_alignment_loss(
            out.align_audio, out.align_visual, AlignmentConfig(t.tau, negs), valid, rng
        )
        total = total_loss(l_ccc, l_align, LossWeights(t.lambda_ccc, t.lambda_align))
    else:
        total = T.scale(l_ccc, t.lambda_ccc)
    return l_ccc, l_align, total


# -- checkpoints ---------------------------------------------------------------------------


def save_checkpoint(directory, params: ModelParams, cfg: Config, extra_arrays: dict | None = None, info: dict | None = None):
    arrays = {f"param.{k}": v for k, v in P.state_dict(params).items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    d = Path(directory)
    P.save_arrays(d, arrays, {"info": info or {}})
    save_config(cfg, d / "config.json")


def load_checkpoint(directory) -> tuple[ModelParams, Config, dict, dict]:
    """Returns (params, config, extra arrays, info)."""
    d = Path(directory)
    if not (d / "config.json").is_file():
        raise DataError(f"not a checkpoint directory (no config.json): {d}")
    cfg = from_dict(json.loads((d / "config.json").read_text()))
    arrays, manifest = P.load_arrays(d)
    params = init_model(cfg.model)
    state = {k[len("param.") :]: v for k, v in arrays.items() if k.startswith("param.")}
    P.load_state_dict(params, state)
    extra = {k: v for k, v in arrays.items() if not k.startswith("param.")}
    return params, cfg, extra, manifest.get("info", {})


# -- evaluation --------------------------------------------------------------------------------


def _targets(session: Session, mode: str) -> list[str]:
    return list(session.pids) if mode == "all" else [session.target]


def predict_session(params: ModelParams, cfg: Config, session: Session, target: str, batch_size: int = 16) -> np.ndarray:
    """Frame predictions for ``target`` stitched from the central regions of its windows."""
    t = cfg.train
    windows = make_windows(session.n, t.window, t.central)
    pred = np.empty(session.n)
    with T.no_grad():
        for i in range(0, len(windows), batch_size):
            chunk = windows[i : i + batch_size]
            batch = make_batch([(session, target, w) for w in chunk])
            out = forward_batch(batch.cues, params, cfg.model, valid=batch.valid)
            y = out.pred.data[..., 0]
            for b, w in enumerate(chunk):
                pred[w.central_start : w.central_stop] = y[b][batch.central[b]]
    return pred


@dataclass
class EvalReport:
    sessions: dict[str, float]
    groups: dict[str, float]
    macro: float
    predictions: dict[str, dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    def rows(self) -> list[tuple[str, str, float]]:
        return [(name, "session", v) for name, v in self.sessions.items()] + [
            (g, "group", v) for g, v in self.groups.items()
        ] + [("macro", "macro", self.macro)]


def evaluate(params: ModelParams, cfg: Config, sessions: Sequence[Session], predictor=None) -> EvalReport:
    """Per-session CCC over stitched full sequences and the macro average over groups.

    ``predictor(session, target) -> (n,)`` replaces the model when given
    (used for baselines).
    """
    if not sessions:
        raise UsageError("evaluate needs at least one session")
    per_session: dict[str, float] = {}
    preds: dict[str, dict[str, np.ndarray]] = {}
    by_group: dict[str, list[float]] = {}
    for s in sessions:
        if s.labels is None or s.labels.size == 0:
            raise DataError(f"session {s.name} has no labels")
        ys, ps = [], []
        preds[s.name] = {}
        for target in _targets(s, cfg.train.targets):
            p = predictor(s, target) if predictor else predict_session(params, cfg, s, target)
            preds[s.name][target] = p
            ps.append(p)
            ys.append(s.label(target))
        v = ccc_numpy(np.concatenate(ps), np.concatenate(ys))
        per_session[s.name] = v
        by_group.setdefault(s.group, []).append(v)
    groups = {g: float(np.mean(v)) for g, v in by_group.items()}
    return EvalReport(per_session, groups, float(np.mean(list(groups.values()))), preds)


# -- training ------------------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams  # EMA weights of the best epoch
    best_val_ccc: float
    metrics_path: Path | None
    step_losses: list[float]
    final_step: int


def _ema_decay(cfg_decay: float, step: int) -> float:
    # ramped decay so a short run is not dominated by the initial weights
    return min(cfg_decay, (1.0 + step) / (10.0 + step))


def train(
    cfg: Config,
    train_sessions: Sequence[Session],
    val_sessions: Sequence[Session],
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Fit the model; writes ``metrics.csv``, ``last/`` and ``best/`` under ``out_dir``."""
    if not train_sessions:
        raise DataError("no training sessions")
    if not val_sessions:
        raise DataError("no held-out sessions")
    t = cfg.train
    out = Path(out_dir) if out_dir is not None else None
    params = init_model(cfg.model)
    named = list(P.named_parameters(params))
    tensors = [p for _, p in named]
    decay_mask = [p.data.ndim >= 2 for p in tensors]
    opt = AdamState.zeros_like([p.data for p in tensors])
    shadow = [p.data.copy() for p in tensors]
    step = 0
    start_epoch = 0
    start_offset = 0  # first batch index of start_epoch (non-zero after a mid-epoch stop)
    best = -math.inf
    rows: list[dict] = []

    if resume is not None:
        rparams, _, extra, info = load_checkpoint(resume)
        P.load_state_dict(params, P.state_dict(rparams))
        n = len(tensors)
        opt.m = [extra[f"opt.m.{i}"] for i in range(n)]
        opt.v = [extra[f"opt.v.{i}"] for i in range(n)]
        shadow = [extra[f"ema.{i}"] for i in range(n)]
        opt.t = step = int(info["step"])
        start_epoch = int(info["epoch"])
        start_offset = int(info.get("offset", 0))
        best = float(info.get("best", -math.inf))
        if out is not None and (out / "metrics.csv").is_file():
            with open(out / "metrics.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))

    items = [
        (s, target, w)
        for s in train_sessions
        for target in _targets(s, t.targets)
        for w in make_windows(s.n, t.window, t.central)
    ]
    steps_per_epoch = math.ceil(len(items) / t.batch_windows)
    total_steps = steps_per_epoch * t.epochs
    lr_min = t.lr / 100 if t.lr_min < 0 else t.lr_min
    step_losses: list[float] = []
    best_state = None

    def swap(arrays):
        cur = [p.data for p in tensors]
        for p, a in zip(tensors, arrays):
            p.data = a
        return cur

    for epoch in range(start_epoch, t.epochs):
        order = np.random.default_rng([t.seed, epoch]).permutation(len(items))
        sums = {"ccc": 0.0, "align": 0.0, "total": 0.0}
        count = 0
        lr = 0.0
        offset = start_offset if epoch == start_epoch else 0
        stopped_at = 0
        for i in range(offset, len(order), t.batch_windows):
            if max_steps is not None and step >= max_steps:
                stopped_at = i
                break
            batch = make_batch([items[j] for j in order[i : i + t.batch_windows]])
            rng = np.random.default_rng([t.seed, step, 1])
            fwd = forward_batch(batch.cues, params, cfg.model, rng, batch.valid)
            l_ccc, l_align, loss = batch_losses(fwd, batch, cfg, rng)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"loss became non-finite at step {step}; last good checkpoint kept")
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in tensors]
            T.zero_grads(tensors)
            grads, _ = clip_gradients(grads, t.max_grad_norm)
            step += 1
            lr = lr_schedule(step, t.lr, t.warmup_steps, total_steps, lr_min)
            optimizer_step([p.data for p in tensors], grads, opt, lr, t.weight_decay, decay_mask)
            ema_update(shadow, [p.data for p in tensors], _ema_decay(t.ema_decay, step))
            step_losses.append(float(loss.data))
            sums["ccc"] += float(l_ccc.data)
            sums["align"] += float(l_align.data) if l_align is not None else 0.0
            sums["total"] += float(loss.data)
            count += 1
        if count == 0:
            break

        live = swap(shadow)
        val = evaluate(params, cfg, val_sessions).macro
        swap(live)
        rows.append(
            {
                "step": step,
                "lr": f"{lr:.8g}",
                "loss_ccc": f"{sums['ccc'] / count:.8f}",
                "loss_align": f"{sums['align'] / count:.8f}",
                "loss_total": f"{sums['total'] / count:.8f}",
                "val_ccc": f"{val:.8f}",
            }
        )
        log.info("epoch %d step %d loss %.4f val_ccc %.4f", epoch + 1, step, sums["total"] / count, val)
        improved = val > best
        if improved:
            best = val
            best_state = [s.copy() for s in shadow]
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            _write_metrics(out / "metrics.csv", rows)
            extra = {f"opt.m.{i}": m for i, m in enumerate(opt.m)}
            extra.update({f"opt.v.{i}": v for i, v in enumerate(opt.v)})
            extra.update({f"ema.{i}": s for i, s in enumerate(shadow)})
            if stopped_at:
                info = {"step": step, "epoch": epoch, "offset": stopped_at, "best": best}
            else:
                info = {"step": step, "epoch": epoch + 1, "best": best}
            save_checkpoint(out / "last", params, cfg, extra, info)
            if improved:
                live = swap(shadow)
                save_checkpoint(out / "best", params, cfg, info={"step": step, "epoch": epoch + 1, "val_ccc": val})
                swap(live)
        if max_steps is not None and step >= max_steps:
            break

    result_params = init_model(cfg.model)
    final = best_state if best_state is not None else shadow
    for (_, p), a in zip(P.named_parameters(result_params), final):
        p.data = a.copy()
    return TrainResult(
        result_params, best, (out / "metrics.csv") if out is not None else None, step_losses, step
    )


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRICS_FIELDS})
