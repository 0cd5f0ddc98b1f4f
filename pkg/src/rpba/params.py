"""Parameter containers: named, ordered collections of learnable tensors."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor

__all__ = [
    "ConvParams",
    "conv_params",
    "count_by_prefix",
    "fingerprint",
    "named_tensors",
    "total_count",
]


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor


def conv_params(rng: np.random.Generator, cout: int, cin: int, k: int, dtype, zero: bool = False) -> ConvParams:
    """Fan-in-scaled uniform init for weight and bias; optionally all-zero."""
    if zero:
        w = np.zeros((cout, cin, k, k), dtype=dtype)
        b = np.zeros((cout,), dtype=dtype)
    else:
        bound = 1.0 / np.sqrt(cin * k * k)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
        b = rng.uniform(-bound, bound, size=(cout,)).astype(dtype)
    return ConvParams(w=Tensor(w, requires_grad=True), b=Tensor(b, requires_grad=True))


def named_tensors(obj, prefix: str = ""):
    """Yield (name, Tensor) pairs in declaration order, recursing into
    dataclasses and sequences. Order is deterministic, so checkpoints and
    optimizer state can rely on it."""
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}")
        return
    raise TypeError(f"cannot walk parameters of type {type(obj).__name__}")


def total_count(obj) -> int:
    return sum(t.size for _, t in named_tensors(obj))


def count_by_prefix(obj) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, t in named_tensors(obj):
        top = name.split(".", 1)[0]
        counts[top] = counts.get(top, 0) + t.size
    return counts


def fingerprint(obj) -> str:
    """Architecture fingerprint: sha256 over the ordered shape table."""
    h = hashlib.sha256()
    for name, t in named_tensors(obj):
        h.update(f"{name}:{t.dtype.name}:{'x'.join(map(str, t.shape))};".encode())
    return h.hexdigest()
