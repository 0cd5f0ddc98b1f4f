"""Training objective: L1 reconstruction plus three grid regularizers.

The regularizers all use mean absolute value so levels with different
lattice sizes contribute on the same scale: smoothness penalizes forward
finite differences along x/y/depth, consistency penalizes the gap between
each grid and the upsampled next-coarser grid, and magnitude penalizes the
coefficients directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from . import ops
from .autograd import ShapeError, Tensor, apply_op, reshape

__all__ = [
    "LossReport",
    "LossWeights",
    "loss_cons",
    "loss_mag",
    "loss_rec",
    "loss_smooth",
    "loss_total",
    "total_from_components",
]


@dataclass
class LossWeights:
    smooth: float = 0.01
    cons: float = 0.01
    mag: float = 0.01

    def validate(self) -> None:
        if self.smooth < 0 or self.cons < 0 or self.mag < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    total: float
    rec: float
    smooth: float
    cons: float
    mag: float


# The reductions below are fused primitives: building them from generic
# slice/sub/abs ops would materialize several grid-sized temporaries per
# term, and these run on every training step.


def _mean_abs(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.dtype.type(_k.mean_abs_fwd(x.data) / n))

    def backward(g):
        return (_k.mean_abs_bwd(x.data, float(g.reshape(())) / n),)

    return apply_op(out, (x,), backward, "mean_abs")


def _mean_abs_sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mean_abs_sub: shapes {a.shape} and {b.shape} differ")
    n = a.size
    out = np.asarray(a.dtype.type(_k.mean_abs_sub_fwd(a.data, b.data) / n))

    def backward(g):
        ga = _k.mean_abs_sub_bwd(a.data, b.data, float(g.reshape(())) / n)
        return (ga, -ga)

    return apply_op(out, (a, b), backward, "mean_abs_sub")


def _mean_abs_diff(x: Tensor, axis: int) -> Tensor:
    """Mean |forward difference| along one axis, normalized by the
    difference tensor's own element count."""
    total, n = _k.mean_abs_diff_fwd(x.data, axis)
    out = np.asarray(x.dtype.type(total / n))

    def backward(g):
        return (_k.mean_abs_diff_bwd(x.data, axis, float(g.reshape(())) / n),)

    return apply_op(out, (x,), backward, "mean_abs_diff")


def loss_rec(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over pixels of the per-pixel L1 norm of the RGB difference."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss_rec: prediction {pred.shape} vs target {target.shape}")
    n_pixels = int(np.prod(pred.shape[-2:]))
    return _mean_abs_sub(pred, target) * (pred.size / n_pixels)


def loss_smooth(grids: list[Tensor]) -> Tensor:
    """Mean |forward difference| along x, y and depth, averaged over levels.

    Accepts (12,D,S,S) grids or batched (B,12,D,S,S) ones; the means run over
    each difference tensor's own element count either way.
    """
    total = None
    for g in grids:
        term = _mean_abs_diff(g, -1) + _mean_abs_diff(g, -2) + _mean_abs_diff(g, -3)
        total = term if total is None else total + term
    return total * (1.0 / len(grids))


def _upsample_grid(grid: Tensor, out_s: int) -> Tensor:
    """Trilinear upsample of a coefficient grid to a finer spatial lattice.

    Depth extent is identical across levels, so the depth leg of the
    trilinear resize is the identity and only the spatial axes interpolate.
    """
    shape = grid.shape
    s_in = shape[-1]
    lead = int(np.prod(shape[:-2]))
    flat = reshape(grid, (1, lead, s_in, s_in))
    up = ops.resize_bilinear(flat, out_s, out_s)
    return reshape(up, shape[:-2] + (out_s, out_s))


def loss_cons(grids: list[Tensor]) -> Tensor:
    """Mean gap between each level and the upsampled next-coarser level."""
    total = None
    for k in range(1, len(grids)):
        out_s = grids[k].shape[-1]
        term = _mean_abs_sub(_upsample_grid(grids[k - 1], out_s), grids[k])
        total = term if total is None else total + term
    return total * (1.0 / (len(grids) - 1))


def loss_mag(grids: list[Tensor]) -> Tensor:
    """Mean |coefficient| over each grid, averaged over levels."""
    total = None
    for g in grids:
        term = _mean_abs(g)
        total = term if total is None else total + term
    return total * (1.0 / len(grids))


def total_from_components(rec: Tensor, grids: list[Tensor], w: LossWeights) -> tuple[Tensor, LossReport]:
    """Combine an already-built reconstruction term with the grid regularizers."""
    w.validate()
    smooth = loss_smooth(grids)
    cons = loss_cons(grids)
    mag = loss_mag(grids)
    total = rec + smooth * w.smooth + cons * w.cons + mag * w.mag
    report = LossReport(
        total=total.item(),
        rec=rec.item(),
        smooth=smooth.item(),
        cons=cons.item(),
        mag=mag.item(),
    )
    return total, report


def loss_total(pred: Tensor, target: Tensor, grids: list[Tensor], w: LossWeights) -> tuple[Tensor, LossReport]:
    """Full objective for a single prediction/target pair."""
    return total_from_components(loss_rec(pred, target), grids, w)
