"""Autoregressive adaptive slicing: grid lookup, learned interpolation, gating.

Every output pixel builds a bilateral coordinate (x, y, 2*guide-1), samples
the center cell plus six axis-aligned one-cell shifts from the level's grid,
blends the seven 12-vectors with predicted softmax weights, and folds the
result into the running residual through a per-channel sigmoid gate. The
final 12-vector parameterizes a 3x4 affine correction around identity that
is applied to the base RGB.

All functions here operate per image (no batch axis) since the recursion is
sequential across levels anyway; the convolutional heads add a singleton
batch dim internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from . import ops
from .autograd import Tensor, apply_op, concat, constant, reshape, permute, slice_
from .grids import COEFF_SCALE, DEPTH, GRID_SIZES
from .params import ConvParams, conv_params

__all__ = [
    "NEIGHBORHOOD",
    "SliceHeadParams",
    "SliceResult",
    "apply_affine",
    "bilateral_coords",
    "gated_refine",
    "init_slice_head",
    "interpolate_residual",
    "neighborhood_offsets",
    "predict_weights",
    "run_all_levels",
    "slice_neighborhood",
]

NEIGHBORHOOD = 7  # center + one-grid-step shifts along x, y, depth


@dataclass
class SliceHeadParams:
    """Weight predictor for one level; refinement levels add the gate pair."""

    eta1: ConvParams  # 28 -> 24, 1x1
    eta2: ConvParams  # 24 -> 7, 1x1
    rho1: ConvParams | None = None  # 28 -> 24, levels 1..3 only
    rho2: ConvParams | None = None  # 24 -> 12


def init_slice_head(rng: np.random.Generator, level: int, dtype=np.float32, zero_exit: bool = True) -> SliceHeadParams:
    head = SliceHeadParams(
        eta1=conv_params(rng, 24, 28, 1, dtype),
        eta2=conv_params(rng, NEIGHBORHOOD, 24, 1, dtype, zero=zero_exit),
    )
    if level > 0:
        head.rho1 = conv_params(rng, 24, 28, 1, dtype)
        head.rho2 = conv_params(rng, 12, 24, 1, dtype, zero=zero_exit)
    return head


def neighborhood_offsets(level: int, dtype=np.float32) -> np.ndarray:
    """(7,3) normalized-coordinate shifts: zero, then +-1 cell per axis."""
    s = GRID_SIZES[level]
    step_s = 2.0 / (s - 1)
    step_d = 2.0 / (DEPTH - 1)
    return np.array(
        [
            (0.0, 0.0, 0.0),
            (step_s, 0.0, 0.0),
            (-step_s, 0.0, 0.0),
            (0.0, step_s, 0.0),
            (0.0, -step_s, 0.0),
            (0.0, 0.0, step_d),
            (0.0, 0.0, -step_d),
        ],
        dtype=dtype,
    )


def pixel_center_xy(height: int, width: int, dtype=np.float32) -> np.ndarray:
    """(H*W, 2) normalized (x, y) at pixel centers, align-corners-false style."""
    xs = (2.0 * (np.arange(width, dtype=np.float64) + 0.5) / width - 1.0).astype(dtype)
    ys = (2.0 * (np.arange(height, dtype=np.float64) + 0.5) / height - 1.0).astype(dtype)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return np.ascontiguousarray(np.stack([grid_x.ravel(), grid_y.ravel()], axis=1))


def bilateral_coords(guide: Tensor) -> Tensor:
    """(1,2H,2W) guide map -> (P,3) coordinates (x, y, 2Q-1) over the pixel grid."""
    _, height, width = guide.shape
    xy = constant(pixel_center_xy(height, width, guide.dtype))
    depth = reshape(guide * 2.0 - 1.0, (height * width, 1))
    return concat([xy, depth], axis=1)


def slice_neighborhood(grid: Tensor, coords: Tensor, offsets: np.ndarray, height: int, width: int) -> Tensor:
    """Sample all 7 shifted lookups in one pass -> (7, 12, H, W).

    Reference composition over the generic trilinear sampler; the training
    path uses the fused variant below, which is held to the same oracle.
    """
    p = coords.shape[0]
    tiled = concat([coords] * NEIGHBORHOOD, axis=0)
    shifts = np.repeat(offsets.astype(coords.dtype), p, axis=0)
    sampled = ops.grid_sample_trilinear(grid, tiled, shift=shifts)  # (7P, 12)
    sampled = reshape(sampled, (NEIGHBORHOOD, p, 12))
    sampled = permute(sampled, (0, 2, 1))
    return reshape(sampled, (NEIGHBORHOOD, 12, height, width))


_SPATIAL_CACHE: dict = {}


def _spatial_cache(level: int, height: int, width: int, dtype):
    key = (level, height, width, np.dtype(dtype).str)
    hit = _SPATIAL_CACHE.get(key)
    if hit is None:
        hit = _k.build_spatial_cache(height, width, GRID_SIZES[level], dtype)
        _SPATIAL_CACHE[key] = hit
    return hit


def slice_neighborhood_fused(grid: Tensor, guide_q: Tensor, level: int, height: int, width: int) -> Tensor:
    """Fused equivalent of bilateral_coords + slice_neighborhood.

    Takes the raw guide values (P,) instead of assembled coordinates; the
    depth index Q*(DEPTH-1) and the pixel-center spatial indices are the same
    mapping the generic sampler applies, with the spatial half precomputed
    once per (level, image size).
    """
    s = GRID_SIZES[level]
    plane = s * s
    yx_idx, wxy = _spatial_cache(level, height, width, grid.dtype)
    grid_t = np.ascontiguousarray(grid.data.reshape(12, DEPTH * plane).T)
    q = guide_q.data
    out, saved = _k.slice_fwd(grid_t, q, yx_idx, wxy, DEPTH, plane)
    dscale = float(DEPTH - 1)  # d(depth index)/dQ

    def backward(g):
        dgrid_t, dq = _k.slice_bwd(grid_t, g.reshape(7, 12, q.size), q, saved,
                                   yx_idx, wxy, DEPTH, plane, dscale)
        return (np.ascontiguousarray(dgrid_t.T).reshape(grid.shape), dq)

    return apply_op(
        out.reshape(NEIGHBORHOOD, 12, height, width), (grid, guide_q), backward, "slice_neighborhood"
    )


def _head_1x1(x: Tensor, c1: ConvParams, c2: ConvParams) -> Tensor:
    h, w = x.shape[1], x.shape[2]
    z = reshape(x, (1, x.shape[0], h, w))
    z = ops.activation(ops.conv2d(z, c1.w, c1.b, stride=1, padding=0), "silu")
    z = ops.conv2d(z, c2.w, c2.b, stride=1, padding=0)
    return reshape(z, (z.shape[1], h, w))


def predict_weights(base_rgb: Tensor, guide: Tensor, center: Tensor, prev: Tensor, head: SliceHeadParams) -> Tensor:
    """Softmax interpolation weights (7,2H,2W) from [base || guide || center || prev]."""
    ctx = concat([base_rgb, guide, center, prev], axis=0)  # (28, H, W)
    logits = _head_1x1(ctx, head.eta1, head.eta2)
    return ops.softmax_over_dim(logits, 0)


def interpolate_residual(samples: Tensor, weights: Tensor) -> Tensor:
    """Convex combination over the 7 shifted samples -> (12, 2H, 2W)."""
    return ops.convex_blend(samples, weights)


def gated_refine(prev: Tensor, interp: Tensor, base_rgb: Tensor, guide: Tensor, head: SliceHeadParams, level: int) -> tuple[Tensor, Tensor]:
    """Blend the fresh estimate into the running residual, per channel.

    Returns (refined, gate); the result lies elementwise between prev and
    interp because the gate is a sigmoid.
    """
    if level < 1:
        raise ValueError("gated_refine is only defined for refinement levels 1..3")
    if head.rho1 is None or head.rho2 is None:
        raise ValueError(f"slice head for level {level} has no gate parameters")
    ctx = concat([base_rgb, guide, interp, prev], axis=0)
    gate = ops.activation(_head_1x1(ctx, head.rho1, head.rho2), "sigmoid")
    refined = prev + gate * (interp - prev)
    return refined, gate


def apply_affine(delta: Tensor, base_rgb: Tensor) -> Tensor:
    """Apply the identity-plus-residual 3x4 affine: out = (I + mat(delta)) [rgb; 1].

    ``delta`` is (12, H, W) in row-major 3x4 order; output is (3, H, W) and is
    deliberately unclamped so training gradients survive.
    """
    if delta.shape[0] != 12 or base_rgb.shape[0] != 3 or delta.shape[1:] != base_rgb.shape[1:]:
        raise ValueError(
            f"apply_affine: need (12,H,W) and (3,H,W) with equal spatial dims, "
            f"got {delta.shape} and {base_rgb.shape}"
        )
    h, w = base_rgb.shape[1], base_rgb.shape[2]
    mat = delta.data.reshape(3, 4, h, w)
    out = base_rgb.data + np.einsum("cjhw,jhw->chw", mat[:, :3], base_rgb.data) + mat[:, 3]

    def backward(g):
        ddelta = np.empty((3, 4, h, w), dtype=delta.dtype)
        ddelta[:, :3] = g[:, None] * base_rgb.data[None]
        ddelta[:, 3] = g
        dbase = g + np.einsum("cjhw,chw->jhw", mat[:, :3], g)
        return (ddelta.reshape(12, h, w), dbase)

    return apply_op(np.ascontiguousarray(out), (delta, base_rgb), backward, "apply_affine")


@dataclass
class SliceResult:
    candidates: list[Tensor]  # four (3, 2H, 2W) reconstructions, coarse to fine
    deltas: list[Tensor]      # four (12, 2H, 2W) residual fields
    gates: list[Tensor]       # three (12, 2H, 2W) gate maps for levels 1..3


def run_all_levels(grids: list[Tensor], base_rgb: Tensor, guide: Tensor, heads: list[SliceHeadParams]) -> SliceResult:
    """Coarse-to-fine recursion over the four grids for one image.

    ``grids[k]`` is (12, DEPTH, S_k, S_k); ``base_rgb`` (3, 2H, 2W); ``guide``
    (1, 2H, 2W). The previous level's residual feeds both the weight
    predictor and the gate, with zeros standing in at the coarsest level.
    """
    if len(grids) != 4 or len(heads) != 4:
        raise ValueError("run_all_levels expects exactly four grids and four heads")
    height, width = base_rgb.shape[1], base_rgb.shape[2]
    qflat = reshape(guide, (height * width,))
    prev = constant(np.zeros((12, height, width), dtype=base_rgb.dtype.type))
    candidates: list[Tensor] = []
    deltas: list[Tensor] = []
    gates: list[Tensor] = []
    for level in range(4):
        samples = slice_neighborhood_fused(grids[level], qflat, level, height, width)
        center = slice_(samples, (0,))
        weights = predict_weights(base_rgb, guide, center, prev, heads[level])
        interp = interpolate_residual(samples, weights)
        if level == 0:
            delta = interp
        else:
            delta, gate = gated_refine(prev, interp, base_rgb, guide, heads[level], level)
            gates.append(gate)
        candidates.append(apply_affine(delta, base_rgb))
        deltas.append(delta)
        prev = delta
    return SliceResult(candidates=candidates, deltas=deltas, gates=gates)
