"""Concordance correlation, frame-wise symmetric InfoNCE, and the weighted objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from damamba import tensor as T
from damamba.errors import ConfigError
from damamba.tensor import Tensor, as_tensor

CCC_EPS = 1e-8
_MASKED = -1e30


@dataclass
class AlignmentConfig:
    tau: float = 0.07
    negatives_per_frame: int | str = "all"
    normalize: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.negatives_per_frame != "all" and int(self.negatives_per_frame) < 1:
            raise ConfigError("negatives_per_frame must be a positive int or 'all'")


@dataclass
class LossWeights:
    lambda_ccc: float = 1.0
    lambda_align: float = 0.4

    def __post_init__(self):
        if not (self.lambda_ccc > 0 and self.lambda_align > 0):
            raise ConfigError(
                f"loss weights must be positive, got ({self.lambda_ccc}, {self.lambda_align})"
            )


def ccc(pred, label, weights=None) -> Tensor:
    """Concordance correlation 2 cov / (var_p + var_l + (mu_p - mu_l)^2).

    Population moments over all elements; ``weights`` (same shape, 0/1)
    restricts the statistics to selected frames. When both series are
    constant the denominator is regularized by 1e-8 and the result is 0.
    """
    p = as_tensor(pred)
    y = as_tensor(label, p.dtype)
    if p.shape != y.shape:
        raise ConfigError(f"ccc: shapes differ {p.shape} vs {y.shape}")
    if weights is None:
        w = None
        count = float(p.data.size)
    else:
        w = as_tensor(np.asarray(weights, dtype=p.dtype).reshape(p.shape))
        count = float(w.data.sum())
    if count < 2:
        raise ConfigError("ccc needs at least two frames")

    def wmean(t):
        return T.scale(T.tsum(t if w is None else t * w), 1.0 / count)

    mp, my = wmean(p), wmean(y)
    dp, dy = p - mp, y - my
    vp, vy, cov = wmean(dp * dp), wmean(dy * dy), wmean(dp * dy)
    diff = mp - my
    denom = vp + vy + diff * diff
    if denom.data < CCC_EPS:
        denom = T.add_scalar(denom, CCC_EPS)
    return T.scale(cov, 2.0) / denom


def is_degenerate(pred, label) -> bool:
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred)
    y = np.asarray(label.data if isinstance(label, Tensor) else label)
    return bool(np.ptp(p) == 0 and np.ptp(y) == 0)


def ccc_loss(pred, label, weights=None) -> Tensor:
    return T.add_scalar(T.scale(ccc(pred, label, weights), -1.0), 1.0)


def ccc_numpy(pred, label) -> float:
    """Plain-float CCC used for evaluation reports."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(label, dtype=np.float64).reshape(-1)
    mp, my = p.mean(), y.mean()
    vp, vy = ((p - mp) ** 2).mean(), ((y - my) ** 2).mean()
    cov = ((p - mp) * (y - my)).mean()
    denom = vp + vy + (mp - my) ** 2
    if denom < CCC_EPS:
        denom += CCC_EPS
    return float(2 * cov / denom)


def _candidate_mask(valid: np.ndarray, negatives, rng: np.random.Generator | None) -> np.ndarray:
    """Additive logit mask (I, n, n): 0 for the positive and chosen negatives."""
    I, n = valid.shape
    allowed = valid[:, None, :] & valid[:, :, None]
    if negatives != "all":
        K = int(negatives)
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = np.zeros_like(allowed)
        for i in range(I):
            idx = np.flatnonzero(valid[i])
            for r in idx:
                pool = idx[idx != r]
                if pool.size:
                    pick = rng.choice(pool, size=min(K, pool.size), replace=False)
                    chosen[i, r, pick] = True
        allowed = chosen
    eye = np.eye(n, dtype=bool)[None] & valid[:, :, None]
    allowed = allowed | eye
    return np.where(allowed, 0.0, _MASKED)


def infonce_alignment_loss(
    audio: Tensor,
    visual: Tensor,
    cfg: AlignmentConfig | None = None,
    valid: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Symmetric frame-wise InfoNCE between audio and visual embeddings.

    ``audio`` / ``visual``: (I, n, k) for I participant sequences. For each
    frame the positive is the other modality at the same frame; negatives
    are the other modality at other frames of the same sequence. Rows are
    l2-normalized and similarities divided by ``tau``. The result averages
    both directions over all valid (sequence, frame) pairs.
    """
    cfg = cfg or AlignmentConfig()
    if audio.shape[-1] != visual.shape[-1]:
        raise ConfigError(
            f"alignment needs equal widths (got {audio.shape[-1]} vs {visual.shape[-1]}); enable the shared projection"
        )
    if audio.shape != visual.shape:
        raise ConfigError(f"alignment shapes differ: {audio.shape} vs {visual.shape}")
    if audio.ndim == 2:
        audio = T.reshape(audio, (1,) + audio.shape)
        visual = T.reshape(visual, (1,) + visual.shape)
    I, n, _ = audio.shape
    valid = np.ones((I, n), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(I, n)
    count = int(valid.sum())
    if count == 0:
        raise ConfigError("alignment loss needs at least one valid frame")

    a = T.l2_normalize(audio) if cfg.normalize else audio
    v = T.l2_normalize(visual) if cfg.normalize else visual
    inv_tau = 1.0 / cfg.tau
    sim = T.scale(T.matmul(a, T.swap_last(v)), inv_tau)  # sim[i, r, j] = s(a_r, v_j)
    pos = T.scale(T.tsum(a * v, axis=-1), inv_tau)
    mask_av = as_tensor(_candidate_mask(valid, cfg.negatives_per_frame, rng).astype(sim.dtype))
    mask_va = as_tensor(_candidate_mask(valid, cfg.negatives_per_frame, rng).astype(sim.dtype))
    l_av = T.logsumexp_rows(sim + mask_av) - pos
    l_va = T.logsumexp_rows(T.swap_last(sim) + mask_va) - pos
    w = as_tensor(valid.astype(sim.dtype))
    return T.scale(T.tsum((l_av + l_va) * w), 1.0 / (2 * count))


def total_loss(ccc_l, align_l, w: LossWeights) -> Tensor:
    """lambda_ccc * ccc_l + lambda_align * align_l."""
    if not isinstance(w, LossWeights):
        w = LossWeights(*w)
    return T.scale(as_tensor(ccc_l), w.lambda_ccc) + T.scale(as_tensor(align_l), w.lambda_align)
