"""Fused hot-path kernels with JIT acceleration and numpy reference fallbacks.

Every kernel here exists in two semantically identical forms: a plain numpy
implementation (the reference, always available, used by tests as the
comparison point) and a numba-compiled single-pass version. Single-threaded
JIT keeps reduction order fixed, so training stays bit-reproducible.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# Mean-absolute reductions for the grid regularizers


def mean_abs_fwd_np(x: np.ndarray) -> float:
    return float(np.abs(x).sum())


@njit(cache=True)
def _mean_abs_fwd_nb(x):
    total = 0.0
    for i in range(x.size):
        v = x[i]
        total += v if v >= 0.0 else -v
    return total


def mean_abs_fwd(x: np.ndarray) -> float:
    if HAVE_NUMBA:
        return float(_mean_abs_fwd_nb(x.reshape(-1)))
    return mean_abs_fwd_np(x)


def mean_abs_bwd_np(x: np.ndarray, scale: float) -> np.ndarray:
    return (np.sign(x) * x.dtype.type(scale)).astype(x.dtype)


@njit(cache=True)
def _mean_abs_bwd_nb(x, scale, out):
    for i in range(x.size):
        v = x[i]
        out[i] = scale if v > 0.0 else (-scale if v < 0.0 else 0.0)


def mean_abs_bwd(x: np.ndarray, scale: float) -> np.ndarray:
    if HAVE_NUMBA:
        out = np.empty(x.size, dtype=x.dtype)
        _mean_abs_bwd_nb(x.reshape(-1), x.dtype.type(scale), out)
        return out.reshape(x.shape)
    return mean_abs_bwd_np(x, scale)


def mean_abs_sub_fwd_np(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).sum())


@njit(cache=True)
def _mean_abs_sub_fwd_nb(a, b):
    total = 0.0
    for i in range(a.size):
        v = a[i] - b[i]
        total += v if v >= 0.0 else -v
    return total


def mean_abs_sub_fwd(a: np.ndarray, b: np.ndarray) -> float:
    if HAVE_NUMBA:
        return float(_mean_abs_sub_fwd_nb(a.reshape(-1), b.reshape(-1)))
    return mean_abs_sub_fwd_np(a, b)


def mean_abs_sub_bwd_np(a: np.ndarray, b: np.ndarray, scale: float) -> np.ndarray:
    return (np.sign(a - b) * a.dtype.type(scale)).astype(a.dtype)


@njit(cache=True)
def _mean_abs_sub_bwd_nb(a, b, scale, out):
    for i in range(a.size):
        v = a[i] - b[i]
        out[i] = scale if v > 0.0 else (-scale if v < 0.0 else 0.0)


def mean_abs_sub_bwd(a: np.ndarray, b: np.ndarray, scale: float) -> np.ndarray:
    if HAVE_NUMBA:
        out = np.empty(a.size, dtype=a.dtype)
        _mean_abs_sub_bwd_nb(a.reshape(-1), b.reshape(-1), a.dtype.type(scale), out)
        return out.reshape(a.shape)
    return mean_abs_sub_bwd_np(a, b, scale)


def _diff_views(x: np.ndarray, axis: int):
    ndim = x.ndim
    axis = axis % ndim
    hi = tuple(slice(1, None) if a == axis else slice(None) for a in range(ndim))
    lo = tuple(slice(None, -1) if a == axis else slice(None) for a in range(ndim))
    return x[hi], x[lo], hi, lo


def mean_abs_diff_fwd_np(x: np.ndarray, axis: int) -> tuple[float, int]:
    hi, lo, _, _ = _diff_views(x, axis)
    d = hi - lo
    return float(np.abs(d).sum()), d.size


@njit(cache=True)
def _mean_abs_diff_fwd_nb(x, outer, extent, inner):
    # view x as (outer, extent, inner); diff along the middle axis
    total = 0.0
    for o in range(outer):
        base = o * extent * inner
        for e in range(extent - 1):
            row = base + e * inner
            for i in range(inner):
                v = x[row + inner + i] - x[row + i]
                total += v if v >= 0.0 else -v
    return total


def _axis_factors(shape: tuple[int, ...], axis: int) -> tuple[int, int, int]:
    axis = axis % len(shape)
    outer = int(np.prod(shape[:axis], dtype=np.int64)) if axis else 1
    extent = shape[axis]
    inner = int(np.prod(shape[axis + 1 :], dtype=np.int64)) if axis + 1 < len(shape) else 1
    return outer, extent, inner


def mean_abs_diff_fwd(x: np.ndarray, axis: int) -> tuple[float, int]:
    if HAVE_NUMBA and x.flags["C_CONTIGUOUS"]:
        outer, extent, inner = _axis_factors(x.shape, axis)
        total = _mean_abs_diff_fwd_nb(x.reshape(-1), outer, extent, inner)
        return float(total), x.size // extent * (extent - 1)
    return mean_abs_diff_fwd_np(x, axis)


def mean_abs_diff_bwd_np(x: np.ndarray, axis: int, scale: float) -> np.ndarray:
    hi, lo, hk, lk = _diff_views(x, axis)
    s = np.sign(hi - lo) * x.dtype.type(scale)
    dx = np.zeros_like(x)
    dx[hk] += s
    dx[lk] -= s
    return dx


@njit(cache=True)
def _mean_abs_diff_bwd_nb(x, outer, extent, inner, scale, dx):
    for o in range(outer):
        base = o * extent * inner
        for e in range(extent - 1):
            row = base + e * inner
            for i in range(inner):
                v = x[row + inner + i] - x[row + i]
                s = scale if v > 0.0 else (-scale if v < 0.0 else 0.0)
                dx[row + inner + i] += s
                dx[row + i] -= s


def mean_abs_diff_bwd(x: np.ndarray, axis: int, scale: float) -> np.ndarray:
    if HAVE_NUMBA and x.flags["C_CONTIGUOUS"]:
        outer, extent, inner = _axis_factors(x.shape, axis)
        dx = np.zeros(x.size, dtype=x.dtype)
        _mean_abs_diff_bwd_nb(x.reshape(-1), outer, extent, inner, x.dtype.type(scale), dx)
        return dx.reshape(x.shape)
    return mean_abs_diff_bwd_np(x, axis, scale)


# ---------------------------------------------------------------------------
# Fused shifted-neighborhood trilinear sampling
#
# Sample order: 0 center, 1 +x, 2 -x, 3 +y, 4 -y, 5 +depth, 6 -depth.
# Spatial variant per sample and depth variant per sample:
_SAMPLE_SPATIAL = np.array([0, 1, 2, 3, 4, 0, 0], dtype=np.int64)
_SAMPLE_DEPTH = np.array([0, 0, 0, 0, 0, 1, 2], dtype=np.int64)


def build_spatial_cache(height: int, width: int, size: int, dtype=np.float32):
    """Corner indices / weights for the 5 spatial lookup variants.

    Pixel centers map into grid-index space via g=(norm+1)/2*(size-1); the
    +-x / +-y variants shift by exactly one cell before border clamping.
    Returns (yx_idx (5,4,P) int32, wxy (5,4,P) dtype) with the corner order
    (y0x0, y0x1, y1x0, y1x1).
    """
    # ((2*(j+0.5)/W - 1) + 1)/2 * (size-1) simplifies exactly to:
    xs = (np.arange(width, dtype=np.float64) + 0.5) * (size - 1) / width
    ys = (np.arange(height, dtype=np.float64) + 0.5) * (size - 1) / height
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    gx = grid_x.ravel()
    gy = grid_y.ravel()
    p = gx.size

    def axis_variants(g):
        out = []
        for shift in (0.0, 1.0, -1.0):
            s = np.clip(g + shift, 0.0, size - 1)
            i0 = np.minimum(np.floor(s).astype(np.int64), size - 2) if size > 1 else np.zeros(p, np.int64)
            i0 = np.maximum(i0, 0)
            f = s - i0
            i1 = np.minimum(i0 + 1, size - 1)
            out.append((i0, i1, f))
        return out

    xv = axis_variants(gx)
    yv = axis_variants(gy)
    # spatial variants: (x-variant, y-variant) pairs for samples 0..4
    pairs = ((0, 0), (1, 0), (2, 0), (0, 1), (0, 2))
    yx_idx = np.empty((5, 4, p), dtype=np.int32)
    wxy = np.empty((5, 4, p), dtype=dtype)
    for sv, (xa, ya) in enumerate(pairs):
        x0, x1, fx = xv[xa]
        y0, y1, fy = yv[ya]
        yx_idx[sv, 0] = y0 * size + x0
        yx_idx[sv, 1] = y0 * size + x1
        yx_idx[sv, 2] = y1 * size + x0
        yx_idx[sv, 3] = y1 * size + x1
        wxy[sv, 0] = ((1 - fy) * (1 - fx)).astype(dtype)
        wxy[sv, 1] = ((1 - fy) * fx).astype(dtype)
        wxy[sv, 2] = (fy * (1 - fx)).astype(dtype)
        wxy[sv, 3] = (fy * fx).astype(dtype)
    return yx_idx, wxy


def depth_variants(q: np.ndarray, depth: int):
    """(d0, d1, frac, inside) per depth-shift variant {0, +1, -1} of Q*(D-1)."""
    g = q.astype(np.float64) * (depth - 1)
    out = []
    for shift in (0.0, 1.0, -1.0):
        s = g + shift
        inside = (s > 0.0) & (s < depth - 1)
        s = np.clip(s, 0.0, depth - 1)
        d0 = np.minimum(np.floor(s).astype(np.int64), depth - 2) if depth > 1 else np.zeros(g.size, np.int64)
        d0 = np.maximum(d0, 0)
        f = s - d0
        d1 = np.minimum(d0 + 1, depth - 1)
        out.append((d0.astype(np.int32), d1.astype(np.int32), f.astype(q.dtype), inside))
    return out


def slice_fwd_np(grid_t: np.ndarray, q: np.ndarray, yx_idx, wxy, depth: int, plane: int) -> np.ndarray:
    """Reference forward: grid_t is (D*S*S, 12) row-major by cell."""
    p = q.size
    dv = depth_variants(q, depth)
    out = np.zeros((7, 12, p), dtype=grid_t.dtype)
    for n in range(7):
        sv = _SAMPLE_SPATIAL[n]
        d0, d1, fd, _ = dv[_SAMPLE_DEPTH[n]]
        for c4 in range(4):
            idx = yx_idx[sv, c4]
            w = wxy[sv, c4]
            v0 = grid_t[d0 * plane + idx]
            v1 = grid_t[d1 * plane + idx]
            out[n] += (w * (1 - fd) * v0.T) + (w * fd * v1.T)
    return out


@njit(cache=True)
def _slice_fwd_nb(grid_t, d0a, d1a, fda, yx_idx, wxy, sample_sv, sample_dv, plane, out):
    p = d0a.shape[1]
    for n in range(7):
        sv = sample_sv[n]
        dv = sample_dv[n]
        for i in range(p):
            d0 = d0a[dv, i] * plane
            d1 = d1a[dv, i] * plane
            fd = fda[dv, i]
            for c4 in range(4):
                idx = yx_idx[sv, c4, i]
                w0 = wxy[sv, c4, i] * (1.0 - fd)
                w1 = wxy[sv, c4, i] * fd
                r0 = d0 + idx
                r1 = d1 + idx
                for ch in range(12):
                    out[n, ch, i] += w0 * grid_t[r0, ch] + w1 * grid_t[r1, ch]


@njit(cache=True)
def _slice_bwd_nb(grid_t, g, d0a, d1a, fda, insidea, yx_idx, wxy, sample_sv, sample_dv,
                  plane, dscale, dgrid_t, dq):
    p = d0a.shape[1]
    for n in range(7):
        sv = sample_sv[n]
        dv = sample_dv[n]
        for i in range(p):
            d0 = d0a[dv, i] * plane
            d1 = d1a[dv, i] * plane
            fd = fda[dv, i]
            acc_d = 0.0
            for c4 in range(4):
                idx = yx_idx[sv, c4, i]
                w = wxy[sv, c4, i]
                w0 = w * (1.0 - fd)
                w1 = w * fd
                r0 = d0 + idx
                r1 = d1 + idx
                for ch in range(12):
                    go = g[n, ch, i]
                    dgrid_t[r0, ch] += w0 * go
                    dgrid_t[r1, ch] += w1 * go
                    acc_d += w * (grid_t[r1, ch] - grid_t[r0, ch]) * go
            if insidea[dv, i]:
                dq[i] += acc_d * dscale


def slice_bwd_np(grid_t, g, q, yx_idx, wxy, depth: int, plane: int, dscale: float):
    """Reference backward matching slice_fwd_np."""
    p = q.size
    dv = depth_variants(q, depth)
    dgrid_t = np.zeros_like(grid_t)
    dq = np.zeros(p, dtype=q.dtype)
    rows = grid_t.shape[0]
    for n in range(7):
        sv = _SAMPLE_SPATIAL[n]
        d0, d1, fd, inside = dv[_SAMPLE_DEPTH[n]]
        gn = g[n]  # (12, P)
        for c4 in range(4):
            idx = yx_idx[sv, c4]
            w = wxy[sv, c4]
            r0 = d0 * plane + idx
            r1 = d1 * plane + idx
            contrib0 = (w * (1 - fd))[:, None] * gn.T
            contrib1 = (w * fd)[:, None] * gn.T
            for ch in range(12):
                dgrid_t[:, ch] += np.bincount(r0, weights=contrib0[:, ch], minlength=rows)
                dgrid_t[:, ch] += np.bincount(r1, weights=contrib1[:, ch], minlength=rows)
            dq += np.where(inside, w * ((grid_t[r1] - grid_t[r0]) * gn.T).sum(axis=1) * q.dtype.type(dscale), 0).astype(q.dtype)
    return dgrid_t, dq


def slice_fwd(grid_t, q, yx_idx, wxy, depth: int, plane: int):
    dv = depth_variants(q, depth)
    if HAVE_NUMBA:
        d0a = np.stack([v[0] for v in dv])
        d1a = np.stack([v[1] for v in dv])
        fda = np.stack([v[2] for v in dv])
        insidea = np.stack([v[3] for v in dv])
        out = np.zeros((7, 12, q.size), dtype=grid_t.dtype)
        _slice_fwd_nb(grid_t, d0a, d1a, fda, yx_idx, wxy, _SAMPLE_SPATIAL, _SAMPLE_DEPTH, plane, out)
        return out, (d0a, d1a, fda, insidea)
    return slice_fwd_np(grid_t, q, yx_idx, wxy, depth, plane), None


def slice_bwd(grid_t, g, q, saved, yx_idx, wxy, depth: int, plane: int, dscale: float):
    if HAVE_NUMBA and saved is not None:
        d0a, d1a, fda, insidea = saved
        dgrid_t = np.zeros_like(grid_t)
        dq = np.zeros(q.size, dtype=grid_t.dtype)
        _slice_bwd_nb(grid_t, np.ascontiguousarray(g), d0a, d1a, fda, insidea,
                      yx_idx, wxy, _SAMPLE_SPATIAL, _SAMPLE_DEPTH, plane,
                      grid_t.dtype.type(dscale), dgrid_t, dq)
        return dgrid_t, dq.astype(q.dtype)
    return slice_bwd_np(grid_t, g, q, yx_idx, wxy, depth, plane, dscale)
