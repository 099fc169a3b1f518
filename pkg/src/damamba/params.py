"""Parameter containers, initialization, enumeration, and persistence.

Parameter trees are plain dataclasses whose leaves are :class:`Tensor`.
``named_parameters`` walks them in field order, which fixes the manifest
order and therefore the optimizer-state layout.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from damamba import tnsr
from damamba.errors import DataError
from damamba.tensor import Tensor


@dataclass
class Affine:
    W: Tensor  # (in, out)
    b: Tensor  # (out,)


@dataclass
class Norm:
    gain: Tensor
    bias: Tensor


def affine(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64, gain: float = 1.0) -> Affine:
    std = gain / np.sqrt(fan_in)
    W = rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)
    return Affine(Tensor(W, requires_grad=True), Tensor(np.zeros(fan_out, dtype), requires_grad=True))


def norm(d: int, dtype=np.float64) -> Norm:
    return Norm(Tensor(np.ones(d, dtype), requires_grad=True), Tensor(np.zeros(d, dtype), requires_grad=True))


def named_parameters(tree, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    if isinstance(tree, Tensor):
        if tree.requires_grad:
            yield prefix, tree
    elif dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            sub = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(getattr(tree, f.name), sub)
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(tree, dict):
        for k, item in tree.items():
            yield from named_parameters(item, f"{prefix}.{k}" if prefix else str(k))


def parameters(tree) -> list[Tensor]:
    return [t for _, t in named_parameters(tree)]


def param_count(tree) -> int:
    """Exact number of trainable scalars in a parameter tree."""
    return sum(t.data.size for _, t in named_parameters(tree))


def cast(tree, dtype) -> None:
    for _, t in named_parameters(tree):
        t.data = t.data.astype(dtype)


def state_dict(tree) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in named_parameters(tree)}


def load_state_dict(tree, state: dict[str, np.ndarray]) -> None:
    named = dict(named_parameters(tree))
    missing = set(named) - set(state)
    extra = set(state) - set(named)
    if missing or extra:
        raise DataError(f"parameter mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, t in named.items():
        arr = state[name]
        if arr.shape != t.shape:
            raise DataError(f"parameter {name}: checkpoint shape {arr.shape} vs model {t.shape}")
        t.data = np.array(arr, dtype=t.dtype)


def save_arrays(directory: str | Path, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write ``arrays`` as TNSR files plus ``manifest.json`` listing names and shapes."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in arrays.items():
        fname = f"{name}.tnsr"
        tnsr.save(d / fname, arr)
        entries.append({"name": name, "file": fname, "shape": list(np.shape(arr))})
    manifest = {"format": "TNSR/1", "tensors": entries}
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_arrays(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"no manifest.json in {d}")
    manifest = json.loads(mpath.read_text())
    arrays = {}
    for e in manifest["tensors"]:
        arr = tnsr.load(d / e["file"])
        if list(arr.shape) != e["shape"]:
            raise DataError(f"{e['file']}: shape {arr.shape} disagrees with manifest {e['shape']}")
        arrays[e["name"]] = arr
    return arrays, manifest
