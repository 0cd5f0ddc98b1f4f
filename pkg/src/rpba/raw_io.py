"""Sensor RAW and RGB image I/O: Bayer packing, PGM/PPM/PNG codecs, tensor dumps.

RAW frames travel as 16-bit PGM mosaics with a plain-text sidecar carrying
``bit_depth`` and ``cfa``; RGB images as 8/16-bit PNG or binary PPM. The
PNG codec is a minimal zlib-based implementation (gray + RGB, no alpha,
no interlace) so files stay hand-inspectable and dependency-free.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "CfaLayout",
    "FormatError",
    "RawFrame",
    "RgbImage",
    "load_image",
    "load_raw",
    "pack_bayer",
    "read_png",
    "read_pnm",
    "read_tensor",
    "save_image",
    "save_raw",
    "unpack_bayer",
    "write_png",
    "write_pnm",
    "write_tensor",
]


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class CfaLayout(Enum):
    RGGB = "RGGB"
    BGGR = "BGGR"
    GRBG = "GRBG"
    GBRG = "GBRG"


# Position of each canonical channel [R, G1, G2, B] inside the 2x2 cell,
# as a flat index row*2+col. G1 is the first green in reading order.
_CFA_SITE = {
    CfaLayout.RGGB: (0, 1, 2, 3),
    CfaLayout.BGGR: (3, 1, 2, 0),
    CfaLayout.GRBG: (1, 0, 3, 2),
    CfaLayout.GBRG: (2, 0, 3, 1),
}


@dataclass
class RawFrame:
    """Bayer mosaic plus capture metadata (black/white levels kept but unused)."""

    mosaic: np.ndarray
    bit_depth: int
    cfa: CfaLayout = CfaLayout.RGGB
    black_level: int | None = None
    white_level: int | None = None

    def validate(self) -> None:
        if self.mosaic.ndim != 2:
            raise FormatError(f"mosaic must be 2-D, got shape {self.mosaic.shape}")
        h, w = self.mosaic.shape
        if h % 2 or w % 2:
            raise FormatError(f"mosaic dimensions {h}x{w} must both be even")
        limit = 1 << self.bit_depth
        peak = int(self.mosaic.max()) if self.mosaic.size else 0
        if peak >= limit:
            raise FormatError(
                f"mosaic value {peak} exceeds {self.bit_depth}-bit range (max {limit - 1})"
            )


@dataclass
class RgbImage:
    planes: np.ndarray  # (3, H, W) float in [0, 1]
    colorspace: str = "srgb"


def pack_bayer(raw: RawFrame) -> np.ndarray:
    """Pack a 2Hx2W mosaic into a normalized (4,H,W) float32 tensor.

    Channels are reordered to the canonical [R, G1, G2, B] convention for
    every CFA layout; values are divided by 2^bit_depth - 1.
    """
    raw.validate()
    m = raw.mosaic
    h2, w2 = m.shape
    cells = m.reshape(h2 // 2, 2, w2 // 2, 2).transpose(1, 3, 0, 2).reshape(4, h2 // 2, w2 // 2)
    order = _CFA_SITE[raw.cfa]
    packed = cells[list(order)].astype(np.float32)
    packed /= np.float32((1 << raw.bit_depth) - 1)
    return np.ascontiguousarray(packed)


def unpack_bayer(packed: np.ndarray, bit_depth: int = 10, cfa: CfaLayout = CfaLayout.RGGB) -> RawFrame:
    """Quantize a normalized (4,H,W) tensor back into a Bayer mosaic."""
    if packed.ndim != 3 or packed.shape[0] != 4:
        raise FormatError(f"packed tensor must be (4,H,W), got {packed.shape}")
    scale = (1 << bit_depth) - 1
    q = np.rint(np.clip(packed, 0.0, 1.0).astype(np.float64) * scale).astype(np.uint16)
    order = _CFA_SITE[cfa]
    cells = np.empty_like(q)
    for chan, site in enumerate(order):
        cells[site] = q[chan]
    _, h, w = q.shape
    mosaic = cells.reshape(2, 2, h, w).transpose(2, 0, 3, 1).reshape(2 * h, 2 * w)
    return RawFrame(mosaic=np.ascontiguousarray(mosaic), bit_depth=bit_depth, cfa=cfa)


# ---------------------------------------------------------------------------
# netpbm (PGM "P5", PPM "P6")

def write_pnm(path: str | os.PathLike, arr: np.ndarray, maxval: int) -> None:
    """Write (H,W) as P5 or (H,W,3) as P6; samples big-endian when maxval > 255."""
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"unsupported pnm array shape {arr.shape}")
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} out of range")
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    h, w = arr.shape[:2]
    payload = arr.astype(dt).tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        f.write(payload)


def _read_pnm_tokens(f, count: int) -> list[int]:
    tokens: list[int] = []
    while len(tokens) < count:
        line = f.readline()
        if not line:
            raise FormatError("truncated pnm header")
        text = line.split(b"#", 1)[0]
        tokens.extend(int(t) for t in text.split())
    return tokens


def read_pnm(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read P5/P6, returning (array, maxval); array is (H,W) or (H,W,3) uint16."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise FormatError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
        w, h, maxval = _read_pnm_tokens(f, 3)
        if not 0 < maxval < 65536:
            raise FormatError(f"{path}: maxval {maxval} out of range")
        channels = 3 if magic == b"P6" else 1
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        n = w * h * channels
        buf = f.read(n * dt.itemsize)
        if len(buf) != n * dt.itemsize:
            raise FormatError(f"{path}: truncated pixel data")
        arr = np.frombuffer(buf, dtype=dt).astype(np.uint16)
        arr = arr.reshape((h, w) if channels == 1 else (h, w, 3))
        return arr, maxval


# ---------------------------------------------------------------------------
# PNG (gray / RGB, 8 or 16 bit, non-interlaced)

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _png_chunk(tag: bytes, data: bytes) -> bytes:
    return (
        struct.pack(">I", len(data))
        + tag
        + data
        + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)
    )


def write_png(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Write (H,W) grayscale or (H,W,3) RGB, uint8 or uint16 (big-endian samples)."""
    if arr.dtype == np.uint8:
        depth = 8
    elif arr.dtype == np.uint16:
        depth = 16
    else:
        raise FormatError(f"png writer needs uint8/uint16, got {arr.dtype}")
    if arr.ndim == 2:
        color = 0
    elif arr.ndim == 3 and arr.shape[2] == 3:
        color = 2
    else:
        raise FormatError(f"unsupported png array shape {arr.shape}")
    h, w = arr.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, depth, color, 0, 0, 0)
    samples = arr.astype(">u2") if depth == 16 else arr
    rows = samples.reshape(h, -1).view(np.uint8) if depth == 8 else samples.reshape(h, -1)
    raw = bytearray()
    for r in range(h):
        raw.append(0)  # filter type None
        raw.extend(rows[r].tobytes())
    with open(path, "wb") as f:
        f.write(_PNG_SIG)
        f.write(_png_chunk(b"IHDR", ihdr))
        f.write(_png_chunk(b"IDAT", zlib.compress(bytes(raw), 6)))
        f.write(_png_chunk(b"IEND", b""))


def _png_unfilter(data: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    prev = np.zeros(stride, dtype=np.int32)
    for r in range(h):
        ftype = data[pos]
        pos += 1
        row = np.frombuffer(data, dtype=np.uint8, count=stride, offset=pos).astype(np.int32)
        pos += stride
        if ftype == 0:
            cur = row
        elif ftype == 2:  # Up
            cur = (row + prev) & 0xFF
        elif ftype in (1, 3, 4):  # Sub / Average / Paeth: sequential in-row dependency
            cur = np.zeros(stride, dtype=np.int32)
            for i in range(stride):
                a = cur[i - bpp] if i >= bpp else 0
                b_ = prev[i]
                if ftype == 1:
                    cur[i] = (row[i] + a) & 0xFF
                elif ftype == 3:
                    cur[i] = (row[i] + ((a + b_) >> 1)) & 0xFF
                else:
                    c = prev[i - bpp] if i >= bpp else 0
                    p = a + b_ - c
                    pa, pb, pc = abs(p - a), abs(p - b_), abs(p - c)
                    if pa <= pb and pa <= pc:
                        pred = a
                    elif pb <= pc:
                        pred = b_
                    else:
                        pred = c
                    cur[i] = (row[i] + pred) & 0xFF
        else:
            raise FormatError(f"unsupported png filter type {ftype}")
        out[r] = cur.astype(np.uint8)
        prev = cur
    return out


def read_png(path: str | os.PathLike) -> np.ndarray:
    """Read a gray or RGB PNG; returns uint8 or uint16, (H,W) or (H,W,3)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _PNG_SIG:
        raise FormatError(f"{path}: not a PNG file")
    pos = 8
    ihdr = None
    idat = bytearray()
    while pos + 8 <= len(blob):
        (length,) = struct.unpack(">I", blob[pos : pos + 4])
        tag = blob[pos + 4 : pos + 8]
        data = blob[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", data)
        elif tag == b"IDAT":
            idat.extend(data)
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise FormatError(f"{path}: missing IHDR")
    w, h, depth, color, comp, filt, interlace = ihdr
    if comp or filt or interlace:
        raise FormatError(f"{path}: unsupported compression/filter/interlace mode")
    if depth not in (8, 16) or color not in (0, 2):
        raise FormatError(f"{path}: only 8/16-bit gray or RGB supported")
    channels = 3 if color == 2 else 1
    bpp = channels * depth // 8
    stride = w * bpp
    raw = zlib.decompress(bytes(idat))
    if len(raw) != h * (stride + 1):
        raise FormatError(f"{path}: pixel data size mismatch")
    bytemat = _png_unfilter(raw, h, stride, bpp)
    if depth == 16:
        arr = bytemat.reshape(h, w, channels, 2)
        vals = (arr[..., 0].astype(np.uint16) << 8) | arr[..., 1]
    else:
        vals = bytemat.reshape(h, w, channels).astype(np.uint8)
    return vals[..., 0] if channels == 1 else vals


# ---------------------------------------------------------------------------
# RPBT tensor dump: magic, version u32, rank u32, extents u64[rank], dtype tag,
# little-endian payload.

_RPBT_MAGIC = b"RPBT"
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<u2"), 4: np.dtype("<u8")}
_TAG_FOR = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("uint16"): 3, np.dtype("uint64"): 4}


def write_tensor(path_or_file, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR:
        raise FormatError(f"no RPBT dtype tag for {arr.dtype}")
    header = _RPBT_MAGIC + struct.pack("<II", 1, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<I", _TAG_FOR[arr.dtype])
    payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    if hasattr(path_or_file, "write"):
        path_or_file.write(header + payload)
    else:
        with open(path_or_file, "wb") as f:
            f.write(header + payload)


def read_tensor(path_or_file) -> np.ndarray:
    close = False
    if hasattr(path_or_file, "read"):
        f = path_or_file
    else:
        f = open(path_or_file, "rb")
        close = True
    try:
        magic = f.read(4)
        if magic != _RPBT_MAGIC:
            raise FormatError(f"bad tensor magic {magic!r}")
        version, rank = struct.unpack("<II", f.read(8))
        if version != 1:
            raise FormatError(f"unsupported tensor dump version {version}")
        if rank > 16:
            raise FormatError(f"implausible tensor rank {rank}")
        shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
        (tag,) = struct.unpack("<I", f.read(4))
        if tag not in _DTYPE_TAGS:
            raise FormatError(f"unknown dtype tag {tag}")
        dt = _DTYPE_TAGS[tag]
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if count > (1 << 34):
            raise FormatError("tensor dimension overflow")
        buf = f.read(count * dt.itemsize)
        if len(buf) != count * dt.itemsize:
            raise FormatError("truncated tensor payload")
        return np.frombuffer(buf, dtype=dt).reshape(shape).copy()
    finally:
        if close:
            f.close()


# ---------------------------------------------------------------------------
# High-level image / RAW entry points

def save_image(path: str | os.PathLike, image: RgbImage, bits: int = 8) -> None:
    """Save an RgbImage as PNG or binary PPM; values are clamped to [0,1]."""
    if bits not in (8, 16):
        raise FormatError(f"unsupported bit depth {bits}")
    planes = np.clip(image.planes, 0.0, 1.0)
    maxval = (1 << bits) - 1
    q = np.rint(planes.astype(np.float64) * maxval)
    hwc = np.ascontiguousarray(q.transpose(1, 2, 0))
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        write_png(path, hwc.astype(np.uint8 if bits == 8 else np.uint16))
    elif ext == ".ppm":
        write_pnm(path, hwc, maxval)
    else:
        raise FormatError(f"unsupported image extension '{ext}' (use .png or .ppm)")


def load_image(path: str | os.PathLike) -> RgbImage:
    """Load a PNG or PPM into float32 planes normalized by the file's max value."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        arr = read_png(path)
        maxval = 255 if arr.dtype == np.uint8 else 65535
    elif ext in (".ppm", ".pgm"):
        arr, maxval = read_pnm(path)
    else:
        raise FormatError(f"unsupported image extension '{ext}'")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    planes = np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) / np.float32(maxval)
    return RgbImage(planes=planes)


def _sidecar_path(pgm_path: str | os.PathLike) -> str:
    return os.path.splitext(str(pgm_path))[0] + ".meta"


def save_raw(path: str | os.PathLike, raw: RawFrame) -> None:
    """Write a mosaic as 16-bit PGM plus its key=value sidecar."""
    raw.validate()
    write_pnm(path, raw.mosaic, (1 << raw.bit_depth) - 1)
    lines = [f"bit_depth={raw.bit_depth}", f"cfa={raw.cfa.value}"]
    if raw.black_level is not None:
        lines.append(f"black_level={raw.black_level}")
    if raw.white_level is not None:
        lines.append(f"white_level={raw.white_level}")
    with open(_sidecar_path(path), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_raw(path: str | os.PathLike) -> RawFrame:
    """Read a 16-bit PGM mosaic and its sidecar; validates maxval vs bit depth."""
    arr, maxval = read_pnm(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: RAW mosaic must be single-channel PGM")
    meta: dict[str, str] = {}
    sidecar = _sidecar_path(path)
    if not os.path.exists(sidecar):
        raise FormatError(f"missing sidecar metadata file {sidecar}")
    with open(sidecar) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{sidecar}: malformed line {line!r}")
            key, val = line.split("=", 1)
            meta[key.strip()] = val.strip()
    try:
        bit_depth = int(meta["bit_depth"])
        cfa = CfaLayout(meta.get("cfa", "RGGB"))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{sidecar}: bad metadata ({exc})") from exc
    if maxval != (1 << bit_depth) - 1:
        raise FormatError(
            f"{path}: PGM maxval {maxval} contradicts sidecar bit depth {bit_depth}"
        )
    frame = RawFrame(
        mosaic=arr,
        bit_depth=bit_depth,
        cfa=cfa,
        black_level=int(meta["black_level"]) if "black_level" in meta else None,
        white_level=int(meta["white_level"]) if "white_level" in meta else None,
    )
    frame.validate()
    return frame
