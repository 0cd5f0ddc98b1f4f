"""Training data: synthetic RAW/RGB pairs, directory loading, batch sampling.

Synthetic pairs invert a fixed camera model: a smooth random RGB field is
gamma-linearized, divided by per-channel gains, mosaiced, and quantized.
The network then has to learn demosaicing plus the gain/gamma inverse,
which makes the desk-scale task a real (if small) inverse problem.

Augmentation happens in packed space. A spatial flip of the mosaic changes
which 2x2 cell corner each channel occupies, so every flip/transpose pairs
a spatial op with a fixed permutation of the packed [R,G1,G2,B] channels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .raw_io import CfaLayout, RawFrame, RgbImage, load_image, load_raw, pack_bayer

__all__ = [
    "Dataset",
    "HFLIP_PERM",
    "TRANSPOSE_PERM",
    "VFLIP_PERM",
    "augment_pair",
    "load_pairs_dir",
    "make_synthetic_dataset",
    "make_synthetic_pair",
    "sample_batch",
]

SYNTH_GAINS = (2.0, 1.0, 1.5)
SYNTH_GAMMA = 2.2

# Packed-channel permutations induced by mosaic-space geometry (RGGB cells):
HFLIP_PERM = (1, 0, 3, 2)      # [R,G1,G2,B] -> [G1,R,B,G2]
VFLIP_PERM = (2, 3, 0, 1)      # -> [G2,B,R,G1]
TRANSPOSE_PERM = (0, 2, 1, 3)  # -> [R,G2,G1,B]


@dataclass
class Dataset:
    """In-memory pairs: packed frames (4,H,W) and RGB targets (3,2H,2W)."""

    packed: list[np.ndarray]
    targets: list[np.ndarray]
    names: list[str]

    def __len__(self) -> int:
        return len(self.packed)


def _smooth_field(rng: np.random.Generator, size: int, waves: int = 4) -> np.ndarray:
    """Sum of random low-frequency sinusoids per channel, clipped to [0,1]."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    rgb = np.empty((3, size, size), dtype=np.float64)
    for c in range(3):
        acc = np.full((size, size), 0.5)
        for _ in range(waves):
            fx = rng.uniform(0.5, 3.0)
            fy = rng.uniform(0.5, 3.0)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.05, 0.25)
            acc += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        rgb[c] = acc
    return np.clip(rgb, 0.0, 1.0)


def make_synthetic_pair(
    rng: np.random.Generator,
    size: int,
    gains: tuple[float, float, float] = SYNTH_GAINS,
    gamma: float = SYNTH_GAMMA,
    bit_depth: int = 10,
) -> tuple[RawFrame, RgbImage]:
    """One mosaic/target pair of mosaic size (size, size); size % 16 == 0."""
    if size % 16:
        raise ValueError(f"synthetic pair size {size} must be divisible by 16")
    rgb = _smooth_field(rng, size)
    linear = np.power(rgb, gamma)
    raw_planes = linear / np.asarray(gains, dtype=np.float64)[:, None, None]
    mosaic_f = np.empty((size, size), dtype=np.float64)
    mosaic_f[0::2, 0::2] = raw_planes[0, 0::2, 0::2]  # R
    mosaic_f[0::2, 1::2] = raw_planes[1, 0::2, 1::2]  # G1
    mosaic_f[1::2, 0::2] = raw_planes[1, 1::2, 0::2]  # G2
    mosaic_f[1::2, 1::2] = raw_planes[2, 1::2, 1::2]  # B
    scale = (1 << bit_depth) - 1
    mosaic = np.clip(np.rint(mosaic_f * scale), 0, scale).astype(np.uint16)
    frame = RawFrame(mosaic=mosaic, bit_depth=bit_depth, cfa=CfaLayout.RGGB)
    return frame, RgbImage(planes=rgb.astype(np.float32))


def make_synthetic_dataset(seed: int, count: int, size: int) -> Dataset:
    rng = np.random.default_rng(seed)
    packed, targets, names = [], [], []
    for i in range(count):
        frame, image = make_synthetic_pair(rng, size)
        packed.append(pack_bayer(frame))
        targets.append(image.planes)
        names.append(f"synthetic_{i:03d}")
    return Dataset(packed=packed, targets=targets, names=names)


def load_pairs_dir(path: str) -> Dataset:
    """Load <stem>.pgm/<stem>.meta RAW frames with <stem>.png RGB targets."""
    stems = sorted(
        os.path.splitext(f)[0] for f in os.listdir(path) if f.endswith(".pgm")
    )
    if not stems:
        raise FileNotFoundError(f"no .pgm RAW frames found in {path}")
    packed, targets, names = [], [], []
    for stem in stems:
        raw_path = os.path.join(path, stem + ".pgm")
        png_path = os.path.join(path, stem + ".png")
        if not os.path.exists(png_path):
            raise FileNotFoundError(f"missing RGB target for pair member {raw_path}")
        frame = load_raw(raw_path)
        image = load_image(png_path)
        p = pack_bayer(frame)
        if image.planes.shape[1:] != frame.mosaic.shape:
            raise ValueError(
                f"{stem}: RGB target {image.planes.shape[1:]} does not match mosaic {frame.mosaic.shape}"
            )
        packed.append(p)
        targets.append(image.planes)
        names.append(stem)
    return Dataset(packed=packed, targets=targets, names=names)


def _permute_packed(packed: np.ndarray, perm: tuple[int, int, int, int]) -> np.ndarray:
    return packed[list(perm)]


def augment_pair(
    packed: np.ndarray,
    rgb: np.ndarray,
    hflip: bool,
    vflip: bool,
    transpose: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the same geometric op to a packed crop and its RGB target."""
    if hflip:
        packed = _permute_packed(packed, HFLIP_PERM)[:, :, ::-1]
        rgb = rgb[:, :, ::-1]
    if vflip:
        packed = _permute_packed(packed, VFLIP_PERM)[:, ::-1, :]
        rgb = rgb[:, ::-1, :]
    if transpose:
        packed = _permute_packed(packed, TRANSPOSE_PERM).transpose(0, 2, 1)
        rgb = rgb.transpose(0, 2, 1)
    return np.ascontiguousarray(packed), np.ascontiguousarray(rgb)


def sample_batch(
    dataset: Dataset,
    batch_size: int,
    crop_rgb: int,
    rng: np.random.Generator,
    augment: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw random aligned crops -> (packed (B,4,c/2,c/2), rgb (B,3,c,c)).

    Crops are taken in packed space so the CFA phase is preserved; the RGB
    window is exactly twice the packed window.
    """
    if crop_rgb % 2:
        raise ValueError(f"crop size {crop_rgb} must be even")
    cp = crop_rgb // 2
    xs = np.empty((batch_size, 4, cp, cp), dtype=np.float32)
    ys = np.empty((batch_size, 3, crop_rgb, crop_rgb), dtype=np.float32)
    for i in range(batch_size):
        idx = int(rng.integers(0, len(dataset)))
        packed = dataset.packed[idx]
        rgb = dataset.targets[idx]
        _, ph, pw = packed.shape
        if ph < cp or pw < cp:
            raise ValueError(
                f"image {dataset.names[idx]} packed size {ph}x{pw} smaller than crop {cp}"
            )
        oy = int(rng.integers(0, ph - cp + 1))
        ox = int(rng.integers(0, pw - cp + 1))
        pc = packed[:, oy : oy + cp, ox : ox + cp]
        rc = rgb[:, 2 * oy : 2 * oy + crop_rgb, 2 * ox : 2 * ox + crop_rgb]
        if augment:
            flips = rng.random(3) < 0.5
            pc, rc = augment_pair(pc, rc, bool(flips[0]), bool(flips[1]), bool(flips[2]))
        xs[i] = pc
        ys[i] = rc
    return xs, ys
