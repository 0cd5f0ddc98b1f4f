"""Binary checkpoint container: parameters, optimizer moments, step, RNG state.

Layout (all little-endian): magic "RPBC", version u32, fingerprint (u32
length + utf8 hex), entry count u32, then per entry: name (u32 length +
utf8), dtype tag u32, rank u32, extents u64[rank], raw payload. Model
tensors use their parameter names; optimizer moments are stored under
"opt.m.<name>" / "opt.v.<name>", the step counter under "opt.step", and the
batch-sampling RNG state under "rng.state", so one file restarts training
bit-exactly.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .model import ModelParams, init_model
from .optim import AdamWState
from .raw_io import FormatError

__all__ = ["load_checkpoint", "rng_from_state", "rng_state_array", "save_checkpoint"]

_MAGIC = b"RPBC"
_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 4: np.dtype("<u8")}
_TAG_FOR = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("uint64"): 4}


def rng_state_array(rng: np.random.Generator) -> np.ndarray:
    """Serialize a PCG64 generator state to six uint64 words."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators are checkpointable")
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    mask = (1 << 64) - 1
    return np.array(
        [s >> 64, s & mask, inc >> 64, inc & mask, st["has_uint32"], st["uinteger"]],
        dtype=np.uint64,
    )


def rng_from_state(words: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in words]
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
        "has_uint32": w[4],
        "uinteger": w[5],
    }
    return np.random.Generator(bg)


def _write_entry(f, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR:
        raise FormatError(f"checkpoint entry '{name}' has unsupported dtype {arr.dtype}")
    nb = name.encode()
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<II", _TAG_FOR[arr.dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def save_checkpoint(
    path: str | os.PathLike,
    params: ModelParams,
    opt: AdamWState | None = None,
    rng: np.random.Generator | None = None,
) -> None:
    entries: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in params.named()]
    if opt is not None:
        entries.extend((f"opt.m.{n}", a) for n, a in opt.m.items())
        entries.extend((f"opt.v.{n}", a) for n, a in opt.v.items())
        entries.append(("opt.step", np.array([opt.step], dtype=np.uint64)))
    if rng is not None:
        entries.append(("rng.state", rng_state_array(rng)))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        fp = params.fingerprint().encode()
        f.write(struct.pack("<I", len(fp)))
        f.write(fp)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(f, name, arr)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike):
    """Read a checkpoint -> (params, opt_state or None, rng or None, fingerprint).

    The architecture is rebuilt from the current code; a checkpoint whose
    shape table does not match raises FormatError.
    """
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (fplen,) = struct.unpack("<I", f.read(4))
        fingerprint = f.read(fplen).decode()
        (count,) = struct.unpack("<I", f.read(4))
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            tag, rank = struct.unpack("<II", f.read(8))
            if tag not in _DTYPE_TAGS:
                raise FormatError(f"{path}: unknown dtype tag {tag} for '{name}'")
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            dt = _DTYPE_TAGS[tag]
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            buf = f.read(n * dt.itemsize)
            if len(buf) != n * dt.itemsize:
                raise FormatError(f"{path}: truncated payload for '{name}'")
            entries[name] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()

    params = init_model(0)
    if params.fingerprint() != fingerprint:
        raise FormatError(
            f"{path}: checkpoint fingerprint {fingerprint[:12]}... does not match "
            f"this build ({params.fingerprint()[:12]}...)"
        )
    opt = AdamWState()
    has_opt = False
    for name, t in params.named():
        if name not in entries:
            raise FormatError(f"{path}: missing parameter '{name}'")
        arr = entries[name]
        if arr.shape != t.shape:
            raise FormatError(f"{path}: shape mismatch for '{name}'")
        t.data = np.ascontiguousarray(arr.astype(t.dtype, copy=False))
        mkey, vkey = f"opt.m.{name}", f"opt.v.{name}"
        if mkey in entries:
            has_opt = True
            opt.m[name] = np.ascontiguousarray(entries[mkey].astype(t.dtype, copy=False))
            opt.v[name] = np.ascontiguousarray(entries[vkey].astype(t.dtype, copy=False))
    if has_opt and "opt.step" in entries:
        opt.step = int(entries["opt.step"][0])
    rng = rng_from_state(entries["rng.state"]) if "rng.state" in entries else None
    return params, (opt if has_opt else None), rng, fingerprint
