"""Base feature extraction, base RGB estimation, and the multi-scale encoder.

The base path turns a packed frame into a 32-channel feature map at packed
resolution and decodes it to a double-resolution RGB estimate through a
12-channel projection and sub-pixel rearrangement. Three stride-2 stages
then build the feature pyramid that drives per-level grid prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import ShapeError, Tensor
from .params import ConvParams, conv_params

__all__ = [
    "BackboneParams",
    "ResidualBlockParams",
    "base_decode",
    "base_encode",
    "encode_pyramid",
    "init_backbone",
    "residual_block",
]

STAGE_WIDTHS = (32, 48, 64, 80)


@dataclass
class ResidualBlockParams:
    """Channel-preserving x + conv(act(conv(x))) unit; identity at zero params."""

    c1: ConvParams
    c2: ConvParams


@dataclass
class BackboneParams:
    stem: ConvParams        # 4 -> 32
    rb1: ResidualBlockParams
    rb2: ResidualBlockParams
    decoder: ConvParams     # 32 -> 12
    e1: ConvParams          # 32 -> 48, stride 2
    e1_rb: ResidualBlockParams
    e2: ConvParams          # 48 -> 64, stride 2
    e2_rb: ResidualBlockParams
    e3: ConvParams          # 64 -> 80, stride 2
    e3_rb: ResidualBlockParams


def res_block_params(rng: np.random.Generator, ch: int, dtype) -> ResidualBlockParams:
    return ResidualBlockParams(
        c1=conv_params(rng, ch, ch, 3, dtype),
        c2=conv_params(rng, ch, ch, 3, dtype),
    )


def init_backbone(rng: np.random.Generator, dtype=np.float32) -> BackboneParams:
    w = STAGE_WIDTHS
    return BackboneParams(
        stem=conv_params(rng, w[0], 4, 3, dtype),
        rb1=res_block_params(rng, w[0], dtype),
        rb2=res_block_params(rng, w[0], dtype),
        decoder=conv_params(rng, 12, w[0], 3, dtype),
        e1=conv_params(rng, w[1], w[0], 3, dtype),
        e1_rb=res_block_params(rng, w[1], dtype),
        e2=conv_params(rng, w[2], w[1], 3, dtype),
        e2_rb=res_block_params(rng, w[2], dtype),
        e3=conv_params(rng, w[3], w[2], 3, dtype),
        e3_rb=res_block_params(rng, w[3], dtype),
    )


def residual_block(x: Tensor, p: ResidualBlockParams) -> Tensor:
    h = ops.conv2d(x, p.c1.w, p.c1.b, stride=1, padding=1)
    h = ops.activation(h, "silu")
    h = ops.conv2d(h, p.c2.w, p.c2.b, stride=1, padding=1)
    return x + h


def base_encode(packed: Tensor, p: BackboneParams) -> Tensor:
    """(B,4,H,W) packed frame -> (B,32,H,W) base features at packed resolution."""
    if packed.data.ndim != 4 or packed.shape[1] != 4:
        raise ShapeError(f"base_encode: input must be (B,4,H,W), got {packed.shape}")
    if packed.shape[2] < 8 or packed.shape[3] < 8:
        raise ShapeError(f"base_encode: spatial size {packed.shape[2:]} below minimum 8x8")
    f0 = ops.conv2d(packed, p.stem.w, p.stem.b, stride=1, padding=1)
    f0 = residual_block(f0, p.rb1)
    return residual_block(f0, p.rb2)


def base_decode(f0: Tensor, p: BackboneParams) -> Tensor:
    """(B,32,H,W) -> (B,3,2H,2W) base RGB via 12-channel projection + shuffle."""
    z = ops.conv2d(f0, p.decoder.w, p.decoder.b, stride=1, padding=1)
    return ops.pixel_shuffle2(z)


def encode_pyramid(f0: Tensor, p: BackboneParams) -> tuple[Tensor, Tensor, Tensor]:
    """Stride-2 stages: (B,32,H,W) -> features at 1/2, 1/4, 1/8 resolution.

    Spatial size must divide by 8; inference callers pad beforehand.
    """
    h, w = f0.shape[2], f0.shape[3]
    if h % 8 or w % 8:
        raise ShapeError(f"encode_pyramid: spatial size {h}x{w} not divisible by 8")
    f1 = ops.activation(ops.conv2d(f0, p.e1.w, p.e1.b, stride=2, padding=1), "silu")
    f1 = residual_block(f1, p.e1_rb)
    f2 = ops.activation(ops.conv2d(f1, p.e2.w, p.e2.b, stride=2, padding=1), "silu")
    f2 = residual_block(f2, p.e2_rb)
    f3 = ops.activation(ops.conv2d(f2, p.e3.w, p.e3.b, stride=2, padding=1), "silu")
    f3 = residual_block(f3, p.e3_rb)
    return f1, f2, f3
