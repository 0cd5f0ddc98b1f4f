"""Per-level 3-D affine-coefficient grids and the guide map that indexes them.

Each level resizes its encoder feature to a fixed lattice size, runs a small
down/up subnet, and emits 12*DEPTH channels squashed by a scaled tanh so
every coefficient stays inside [-COEFF_SCALE, COEFF_SCALE]. The guide network
maps the base RGB to a single channel in (0,1) that becomes the depth
coordinate during slicing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor, reshape
from .backbone import ResidualBlockParams, res_block_params, residual_block
from .params import ConvParams, conv_params

__all__ = [
    "COEFF_SCALE",
    "DEPTH",
    "GRID_SIZES",
    "GridSubnetParams",
    "GuideParams",
    "init_grid_subnet",
    "init_guide",
    "predict_grid",
    "predict_guide",
]

GRID_SIZES = (16, 32, 64, 128)  # spatial lattice size per level, coarse to fine
DEPTH = 8                       # guide-depth bins
COEFF_SCALE = 0.15              # residual affine amplitude bound (alpha)

# Subnet internal widths; chosen so the full model lands near its published
# parameter budget. Level input widths come from the encoder stage aliases.
_SUBNET_WIDTHS = (32, 48, 64)
LEVEL_INPUT_CHANNELS = (80, 64, 48, 32)


@dataclass
class GridSubnetParams:
    entry: ConvParams   # Cin -> 32
    down1: ConvParams   # 32 -> 48, stride 2
    down2: ConvParams   # 48 -> 64, stride 2
    rb1: ResidualBlockParams
    rb2: ResidualBlockParams
    up1: ConvParams     # 64 -> 48 after x2 upsample
    up2: ConvParams     # 48 -> 32 after x2 upsample
    exit: ConvParams    # 32 -> 12*DEPTH, 1x1


@dataclass
class GuideParams:
    c1: ConvParams  # 3 -> 16
    c2: ConvParams  # 16 -> 1, 1x1


def init_grid_subnet(rng: np.random.Generator, level: int, dtype=np.float32, zero_exit: bool = True) -> GridSubnetParams:
    w0, w1, w2 = _SUBNET_WIDTHS
    cin = LEVEL_INPUT_CHANNELS[level]
    return GridSubnetParams(
        entry=conv_params(rng, w0, cin, 3, dtype),
        down1=conv_params(rng, w1, w0, 3, dtype),
        down2=conv_params(rng, w2, w1, 3, dtype),
        rb1=res_block_params(rng, w2, dtype),
        rb2=res_block_params(rng, w2, dtype),
        up1=conv_params(rng, w1, w2, 3, dtype),
        up2=conv_params(rng, w0, w1, 3, dtype),
        exit=conv_params(rng, 12 * DEPTH, w0, 1, dtype, zero=zero_exit),
    )


def init_guide(rng: np.random.Generator, dtype=np.float32) -> GuideParams:
    return GuideParams(
        c1=conv_params(rng, 16, 3, 3, dtype),
        c2=conv_params(rng, 1, 16, 1, dtype),
    )


def predict_grid(level: int, feature: Tensor, p: GridSubnetParams) -> Tensor:
    """Predict the level's coefficient lattice: (B,Cin,h,w) -> (B,12,DEPTH,S,S).

    The 12*DEPTH output channels unpack coefficient-major: channel c*DEPTH+d
    holds coefficient c at depth bin d.
    """
    if not 0 <= level <= 3:
        raise ValueError(f"grid level {level} out of range 0..3")
    s = GRID_SIZES[level]
    x = ops.resize_bilinear(feature, s, s)
    e = ops.conv2d(x, p.entry.w, p.entry.b, stride=1, padding=1)
    d1 = ops.activation(ops.conv2d(e, p.down1.w, p.down1.b, stride=2, padding=1), "silu")
    d2 = ops.activation(ops.conv2d(d1, p.down2.w, p.down2.b, stride=2, padding=1), "silu")
    r = residual_block(residual_block(d2, p.rb1), p.rb2)
    u1 = ops.resize_bilinear(r, s // 2, s // 2)
    u1 = ops.activation(ops.conv2d(u1, p.up1.w, p.up1.b, stride=1, padding=1), "silu")
    u1 = u1 + d1
    u2 = ops.resize_bilinear(u1, s, s)
    u2 = ops.activation(ops.conv2d(u2, p.up2.w, p.up2.b, stride=1, padding=1), "silu")
    u2 = u2 + e
    z = ops.conv2d(u2, p.exit.w, p.exit.b, stride=1, padding=0)
    g = ops.activation(z, "tanh") * COEFF_SCALE
    b = g.shape[0]
    return reshape(g, (b, 12, DEPTH, s, s))


def predict_guide(base_rgb: Tensor, p: GuideParams) -> Tensor:
    """(B,3,2H,2W) base RGB -> (B,1,2H,2W) guide map strictly inside (0,1)."""
    h = ops.activation(ops.conv2d(base_rgb, p.c1.w, p.c1.b, stride=1, padding=1), "silu")
    z = ops.conv2d(h, p.c2.w, p.c2.b, stride=1, padding=0)
    return ops.activation(z, "sigmoid")
