"""Typed configuration with JSON files and dotted ``key=value`` overrides.

Sections: ``model``, ``train``, ``data``, ``bench``. An override key may be
fully dotted (``model.partner_fusion=false``) or a bare field name when it
is unique across sections (``lambda_align=0``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from damamba.errors import ConfigError


@dataclass
class ModelConfig:
    d: int = 16
    k_a: int = 32
    k_v: int = 32
    layers: int = 4
    ctx_layers: int = 4
    d_state: int = 16
    conv_kernel: int = 4
    expand: int = 2
    chunk_size: int = 32
    heads: int = 1
    dropout: float = 0.1
    selective: bool = False
    ctx_identity: bool = False
    modality_fusion: bool = True
    partner_fusion: bool = True
    backend: str = "mamba"
    bounded_head: bool = True
    init_seed: int = 0


@dataclass
class TrainConfig:
    lr: float = 5e-5
    lr_min: float = -1.0  # < 0: lr / 100
    weight_decay: float = 0.01
    batch_windows: int = 8
    window: int = 96
    central: int = 32
    warmup_steps: int = 500
    max_grad_norm: float = 5.0
    ema_decay: float = 0.999
    epochs: int = 30
    seed: int = 0
    lambda_ccc: float = 1.0
    lambda_align: float = 0.4
    tau: float = 0.07
    negatives: int = 0  # 0: every other frame in the window
    ccc_scope: str = "batch"
    targets: str = "all"


@dataclass
class DataConfig:
    train_dir: str = ""
    val_dir: str = ""
    participants: int = 2
    frames: int = 192
    train_sessions: int = 8
    val_sessions: int = 4
    noise: float = 2.0
    seed: int = 7


@dataclass
class BenchConfig:
    lengths: str = "256,512,1024,2048"
    d: int = 32
    chunk_size: int = 32
    repeats: int = 5
    warmups: int = 2
    cap_bytes: int = 0
    partners: str = "2,3,5"
    partner_frames: int = 512
    dtype: str = "f32"


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


# values taken from the published training setup; shown in --help
PUBLISHED_DEFAULTS = {
    "model.layers": "4",
    "model.ctx_layers": "4",
    "model.d_state": "16",
    "model.conv_kernel": "4",
    "model.expand": "2",
    "model.chunk_size": "32",
    "train.lr": "5e-5",
    "train.batch_windows": "128",
    "train.window": "96",
    "train.central": "32",
    "train.warmup_steps": "500",
    "train.max_grad_norm": "5.0",
    "train.ema_decay": "0.999",
    "train.lambda_ccc": "1.0",
    "train.lambda_align": "0.4",
}

SECTIONS = ("model", "train", "data", "bench")


def validate(cfg: Config) -> Config:
    m, t = cfg.model, cfg.train
    for name in ("d", "k_a", "k_v", "layers", "d_state", "conv_kernel", "expand", "chunk_size", "heads"):
        if getattr(m, name) < 1:
            raise ConfigError(f"model.{name} must be >= 1")
    if m.ctx_layers < 0:
        raise ConfigError("model.ctx_layers must be >= 0")
    if m.backend not in ("mamba", "attention"):
        raise ConfigError(f"model.backend must be mamba|attention, got {m.backend!r}")
    if not 0.0 <= m.dropout < 1.0:
        raise ConfigError("model.dropout must be in [0, 1)")
    if t.window != t.central + 2 * 32 or t.central != 32:
        raise ConfigError("train.window must equal train.central + 2 * 32 with 32 central frames")
    for name in ("lr", "batch_windows", "max_grad_norm", "epochs", "tau", "lambda_ccc"):
        if getattr(t, name) <= 0:
            raise ConfigError(f"train.{name} must be positive")
    if t.lambda_align < 0:
        raise ConfigError("train.lambda_align must be >= 0 (0 disables alignment)")
    if t.warmup_steps < 0 or not 0 < t.ema_decay < 1:
        raise ConfigError("train.warmup_steps >= 0 and 0 < ema_decay < 1 required")
    if t.ccc_scope not in ("batch", "window"):
        raise ConfigError("train.ccc_scope must be batch|window")
    if t.targets not in ("all", "meta"):
        raise ConfigError("train.targets must be all|meta")
    if cfg.data.participants < 2:
        raise ConfigError("a dialogue needs a partner: data.participants must be >= 2")
    return cfg


def to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(raw: dict) -> Config:
    cfg = Config()
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        for key, value in values.items():
            _set(cfg, section, key, value)
    return validate(cfg)


def load(path: str | Path | None) -> Config:
    if not path:
        return validate(Config())
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def save(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def _field_types(section: str) -> dict[str, Any]:
    cls = type(getattr(Config(), section))
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _coerce(section: str, key: str, value):
    types = _field_types(section)
    if key not in types:
        raise ConfigError(f"unknown config key {section}.{key}")
    typ = types[key]
    try:
        if typ == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on"):
                return True
            if isinstance(value, str) and value.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if typ == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}: cannot interpret {value!r} as {typ}") from exc


def _set(cfg: Config, section: str, key: str, value) -> None:
    setattr(getattr(cfg, section), key, _coerce(section, key, value))


def resolve_key(key: str) -> tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        return section, name
    hits = [s for s in SECTIONS if key in _field_types(s)]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    if len(hits) > 1:
        raise ConfigError(f"ambiguous key {key!r}; use one of {[f'{s}.{key}' for s in hits]}")
    return hits[0], key


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        section, name = resolve_key(key.strip())
        _set(cfg, section, name, value.strip())
    return validate(cfg)


def describe() -> str:
    """One line per config key with its default (and published value where known)."""
    lines = []
    base = Config()
    for section in SECTIONS:
        for f in dataclasses.fields(getattr(base, section)):
            key = f"{section}.{f.name}"
            default = getattr(getattr(base, section), f.name)
            published = PUBLISHED_DEFAULTS.get(key)
            note = f"  [published: {published}]" if published is not None else ""
            lines.append(f"  {key} = {default!r}{note}")
    return "\n".join(lines)


def synthetic_benchmark_config() -> Config:
    """Desk-scale preset used for the seeded synthetic learning benchmark.

    Only the step-size settings differ from the defaults: a few hundred
    optimizer steps cannot move weights far at lr 5e-5 with a 500-step ramp.
    """
    cfg = Config()
    cfg.train.lr = 2e-3
    cfg.train.warmup_steps = 30
    cfg.train.epochs = 30
    return validate(cfg)
