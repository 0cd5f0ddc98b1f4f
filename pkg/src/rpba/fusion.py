"""Adaptive cross-layer fusion: a pixel-wise convex vote over the candidates.

One 1x1 projection maps the concatenated candidate RGBs to four logits; a
softmax across levels turns them into weights that sum to one at every
pixel, and the output is the weighted sum. No further decoding happens, so
each level's contribution stays directly readable from the weight maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import ShapeError, Tensor, concat, reshape
from .params import ConvParams, conv_params

__all__ = ["FusionParams", "fuse", "init_fusion"]


@dataclass
class FusionParams:
    conv: ConvParams  # 12 -> 4, 1x1


def init_fusion(rng: np.random.Generator, dtype=np.float32, zero: bool = True) -> FusionParams:
    return FusionParams(conv=conv_params(rng, 4, 12, 1, dtype, zero=zero))


def fuse(candidates: list[Tensor], p: FusionParams) -> tuple[Tensor, Tensor]:
    """Blend four (3,2H,2W) candidates -> (fused (3,2H,2W), weights (4,2H,2W))."""
    if len(candidates) != 4:
        raise ShapeError(f"fuse expects 4 candidates, got {len(candidates)}")
    shape = candidates[0].shape
    for i, c in enumerate(candidates):
        if c.shape != shape:
            raise ShapeError(f"candidate {i} shape {c.shape} differs from {shape}")
    h, w = shape[1], shape[2]
    stacked_12 = reshape(concat(candidates, axis=0), (1, 12, h, w))
    logits = ops.conv2d(stacked_12, p.conv.w, p.conv.b, stride=1, padding=0)
    weights = reshape(ops.softmax_over_dim(logits, 1), (4, h, w))
    stack = concat([reshape(c, (1, 3, h, w)) for c in candidates], axis=0)
    fused = ops.convex_blend(stack, weights)
    return fused, weights
