"""Per-participant cue streams: alignment, projection, grouping, and sessions.

Five cues per participant arrive at two rates. Every stream is linearly
resampled to the top rate, projected to a common width ``d`` by a per-frame
affine map, encoded by one single-layer block per cue, and concatenated
into an audio group (ege, w2v) and a visual group (clip, of, of2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from damamba import tnsr
from damamba.block import MambaBlockParams, mamba_block_forward
from damamba.errors import AlignmentError, ConfigError, DataError, DimensionError
from damamba.params import Affine
from damamba.tensor import Tensor, concat, linear

# name, nominal rate (Hz), raw width
CUES: tuple[tuple[str, int, int], ...] = (
    ("ege", 100, 88),
    ("w2v", 100, 1024),
    ("clip", 25, 512),
    ("of", 25, 714),
    ("of2", 25, 139),
)
CUE_NAMES = tuple(c[0] for c in CUES)
CUE_WIDTHS = {c[0]: c[2] for c in CUES}
AUDIO_CUES = ("ege", "w2v")
VISUAL_CUES = ("clip", "of", "of2")
RAW_WIDTH = sum(CUE_WIDTHS.values())

# synthetic sessions keep the 4:1 rate ratio at a smaller scale
SYNTH_RATES = {"ege": 8, "w2v": 8, "clip": 2, "of": 2, "of2": 2}


@dataclass
class CueSet:
    """Raw streams of one participant, each at its own frame rate."""

    streams: dict[str, np.ndarray]
    rates: dict[str, float]
    duration: float

    def __post_init__(self):
        for name in CUE_NAMES:
            if name not in self.streams:
                raise DataError(f"CueSet missing cue {name!r}")
            s = np.asarray(self.streams[name], dtype=np.float64)
            if s.ndim != 2 or s.shape[1] != CUE_WIDTHS[name]:
                raise DimensionError(f"cue {name}: shape {s.shape}, expected (frames, {CUE_WIDTHS[name]})")
            expected = int(round(self.rates[name] * self.duration))
            if s.shape[0] == expected + 1:
                s = s[:expected]
            elif abs(s.shape[0] - expected) > 1:
                raise AlignmentError(
                    f"cue {name}: {s.shape[0]} frames, expected {expected} at {self.rates[name]} Hz"
                )
            self.streams[name] = s

    @property
    def top_rate(self) -> float:
        return max(self.rates[c] for c in CUE_NAMES)

    @property
    def n_frames(self) -> int:
        return int(round(self.top_rate * self.duration))

    def aligned(self) -> dict[str, np.ndarray]:
        """All cues resampled to the top rate, each (n, width)."""
        n = self.n_frames
        return {c: resample_linear(self.streams[c], n) for c in CUE_NAMES}


@dataclass
class ModalityGroups:
    audio: Tensor  # (..., n, 2d)
    visual: Tensor  # (..., n, 3d)

    @property
    def n(self) -> int:
        return self.audio.shape[-2]


@dataclass
class Session:
    """A multi-party conversation with per-frame labels for every participant."""

    pids: list[str]
    cues: dict[str, CueSet]
    labels: np.ndarray  # (n, M) at the top rate
    target: str
    group: str = "synthetic"
    name: str = "session"
    _aligned: dict = field(default_factory=dict, repr=False)

    @property
    def M(self) -> int:
        return len(self.pids)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def aligned(self, pid: str) -> dict[str, np.ndarray]:
        if pid not in self._aligned:
            a = self.cues[pid].aligned()
            for c, arr in a.items():
                if arr.shape[0] != self.n:
                    raise AlignmentError(f"{self.name}/{pid}/{c}: {arr.shape[0]} frames vs {self.n} labels")
            self._aligned[pid] = a
        return self._aligned[pid]

    def label(self, pid: str) -> np.ndarray:
        return self.labels[:, self.pids.index(pid)]


# -- operations -------------------------------------------------------------------


def resample_linear(stream, n: int):
    """Linearly interpolate ``stream`` (m, w) onto ``n`` evenly spaced frames.

    Output frame ``i`` sits at fractional source index ``i * (m-1) / (n-1)``,
    so both endpoints are kept. A single-frame stream is repeated.
    """
    as_tensor = isinstance(stream, Tensor)
    x = np.asarray(stream.data if as_tensor else stream, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError(f"resample_linear needs a non-empty (frames, width) stream, got {x.shape}")
    if n < 1:
        raise DataError(f"target length must be >= 1, got {n}")
    m = x.shape[0]
    if m == 1:
        out = np.repeat(x, n, axis=0)
    elif m == n:
        out = x.copy()
    else:
        pos = (np.arange(n) * (m - 1)) / max(n - 1, 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, m - 1)
        frac = (pos - lo)[:, None]
        out = (1.0 - frac) * x[lo] + frac * x[hi]
    return Tensor(out) if as_tensor else out


def project_cue(stream: Tensor, proj: Affine) -> Tensor:
    """Per-frame affine projection to the common width (a 1x1 convolution)."""
    return linear(stream, proj.W, proj.b)


def encode_cue(stream: Tensor, block: MambaBlockParams, rng=None) -> Tensor:
    return mamba_block_forward(stream, block, rng)


def build_modality_groups(encoded: dict[str, Tensor]) -> ModalityGroups:
    """Concatenate encoded cues on the feature axis: [ege|w2v] and [clip|of|of2]."""
    missing = [c for c in CUE_NAMES if c not in encoded]
    if missing:
        raise DataError(f"missing encoded cues {missing}")
    frames = {c: encoded[c].shape[-2] for c in CUE_NAMES}
    if len(set(frames.values())) != 1:
        raise AlignmentError(f"encoded cues disagree on frame count: {frames}")
    widths = {c: encoded[c].shape[-1] for c in CUE_NAMES}
    if len(set(widths.values())) != 1:
        raise DimensionError(f"encoded cues disagree on width: {widths}")
    audio = concat([encoded[c] for c in AUDIO_CUES], axis=-1)
    visual = concat([encoded[c] for c in VISUAL_CUES], axis=-1)
    return ModalityGroups(audio, visual)


# -- synthetic data -----------------------------------------------------------------


def _loadings(world_seed: int) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(world_seed)
    return {c: (rng.normal(0, 1, w), rng.normal(0, 1, w)) for c, _, w in CUES}


def latent_trajectory(rng: np.random.Generator, n: int, components: int = 3) -> np.ndarray:
    """Smooth engagement curve in [0, 1]: a level plus slow sinusoids."""
    t = np.arange(n, dtype=np.float64)
    z = np.full(n, rng.uniform(0.4, 0.6))
    for _ in range(components):
        period = rng.uniform(48.0, 160.0)
        z += 0.1 * np.sin(2 * math.pi * t / period + rng.uniform(0, 2 * math.pi))
    return np.clip(z, 0.0, 1.0)


def generate_synthetic_session(
    seed: int,
    M: int = 2,
    n: int = 192,
    *,
    noise: float = 2.0,
    world_seed: int = 0,
    rates: dict[str, int] | None = None,
    name: str | None = None,
) -> Session:
    """Deterministic synthetic dialogue with linearly recoverable engagement.

    Each participant gets a latent curve; every cue is ``latent * w + b``
    plus a per-participant offset and Gaussian noise, sampled at the cue's
    own rate. ``w``, ``b`` come from ``world_seed`` so they are shared by
    all sessions. Labels are the latent curves at the top rate.
    """
    if M < 2:
        raise ConfigError(f"a dialogue needs a partner: M must be >= 2, got {M}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rates = dict(rates or SYNTH_RATES)
    top = max(rates.values())
    duration = n / top
    load = _loadings(world_seed)
    rng = np.random.default_rng(seed)
    pids = [f"p{i}" for i in range(M)]
    labels = np.empty((n, M))
    cues = {}
    for j, pid in enumerate(pids):
        z = latent_trajectory(rng, n)
        labels[:, j] = z
        streams = {}
        for c, _, w in CUES:
            m = int(round(rates[c] * duration))
            m = max(m, 1)
            pos = (np.arange(m) * (n - 1)) / max(m - 1, 1) if m > 1 else np.zeros(1)
            zc = np.interp(pos, np.arange(n), z)
            wv, bv = load[c]
            offset = rng.normal(0, 0.5, w)
            streams[c] = zc[:, None] * wv + bv + offset + noise * rng.normal(0, 1, (m, w))
        cues[pid] = CueSet(streams, {c: float(rates[c]) for c in CUE_NAMES}, duration)
    return Session(pids, cues, labels, target=pids[0], name=name or f"synth{seed}")


def session_seed(seed: int, index: int) -> int:
    """Seed of the ``index``-th session of a set generated with ``seed``."""
    return seed * 100_003 + index


def benchmark_sessions(data) -> tuple[list[Session], list[Session]]:
    """The seeded synthetic benchmark for a ``DataConfig``: (train, held-out).

    Training sessions use ``data.seed``, held-out ones ``data.seed + 1``,
    matching ``damamba generate --seed S`` and ``--seed S+1``.
    """

    def make(seed, count):
        return [
            generate_synthetic_session(
                session_seed(seed, i), data.participants, data.frames, noise=data.noise, name=f"session_{i:03d}"
            )
            for i in range(count)
        ]

    return make(data.seed, data.train_sessions), make(data.seed + 1, data.val_sessions)


# -- on-disk layout -------------------------------------------------------------------


def write_session(directory: str | Path, session: Session) -> None:
    """``<dir>/<pid>/<cue>.tnsr``, ``<dir>/labels.tnsr`` (n x M), ``<dir>/meta``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for pid in session.pids:
        (d / pid).mkdir(exist_ok=True)
        for c in CUE_NAMES:
            tnsr.save(d / pid / f"{c}.tnsr", session.cues[pid].streams[c])
    tnsr.save(d / "labels.tnsr", session.labels)
    cs = session.cues[session.pids[0]]
    meta = {
        "name": session.name,
        "group": session.group,
        "M": session.M,
        "n": session.n,
        "target": session.target,
        "participants": ",".join(session.pids),
        "duration": repr(cs.duration),
        "rates": ",".join(f"{c}={cs.rates[c]:g}" for c in CUE_NAMES),
    }
    (d / "meta").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def read_meta(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise DataError(f"missing session meta file: {path}")
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}: malformed line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_session(directory: str | Path) -> Session:
    d = Path(directory)
    meta = read_meta(d / "meta")
    try:
        pids = meta["participants"].split(",")
        duration = float(meta["duration"])
        rates = {k: float(v) for k, v in (kv.split("=") for kv in meta["rates"].split(","))}
    except (KeyError, ValueError) as exc:
        raise DataError(f"{d}/meta: {exc}") from exc
    labels = tnsr.load(d / "labels.tnsr")
    if labels.ndim != 2 or labels.shape[1] != len(pids):
        raise DataError(f"{d}/labels.tnsr: shape {labels.shape} vs {len(pids)} participants")
    cues = {pid: CueSet({c: tnsr.load(d / pid / f"{c}.tnsr") for c in CUE_NAMES}, rates, duration) for pid in pids}
    return Session(
        pids, cues, labels, target=meta.get("target", pids[0]), group=meta.get("group", "default"), name=meta.get("name", d.name)
    )
