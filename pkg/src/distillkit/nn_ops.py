"""Network-level ops composed from autodiff primitives.

Everything here is a composition of linear gathers, matmuls and elementwise
primitives, so first- and second-order gradients come from the engine with no
hand-written backward rules.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    add,
    matmul,
    mul,
    permute,
    pow_const,
    put_flat,
    reshape,
    sub,
    take_flat,
    tensor_mean,
)
from .errors import ShapeError

INSTANCE_NORM_EPS = 1e-5

_PAD_IDX_CACHE: dict = {}
_IM2COL_IDX_CACHE: dict = {}


def _pad2d_indices(n, c, h, w, p):
    key = (n, c, h, w, p)
    idx = _PAD_IDX_CACHE.get(key)
    if idx is None:
        hp, wp = h + 2 * p, w + 2 * p
        ni = np.arange(n, dtype=np.int64)[:, None, None, None]
        ci = np.arange(c, dtype=np.int64)[None, :, None, None]
        yi = (np.arange(h, dtype=np.int64) + p)[None, None, :, None]
        xi = (np.arange(w, dtype=np.int64) + p)[None, None, None, :]
        idx = (((ni * c + ci) * hp + yi) * wp + xi).ravel()
        _PAD_IDX_CACHE[key] = idx
    return idx


def pad2d(x, p: int) -> Tensor:
    """Zero-pad the two trailing spatial axes of an NCHW tensor by p."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("pad2d", (x.shape,), "expects NCHW")
    n, c, h, w = x.shape
    idx = _pad2d_indices(n, c, h, w, p)
    flat = put_flat(x, idx, n * c * (h + 2 * p) * (w + 2 * p))
    return reshape(flat, (n, c, h + 2 * p, w + 2 * p))


def _im2col_indices(n, c, h, w):
    """Flat gather indices over the padded input, laid out (C*9, N*H*W)."""
    key = (n, c, h, w)
    idx = _IM2COL_IDX_CACHE.get(key)
    if idx is None:
        hp, wp = h + 2, w + 2
        ci = np.arange(c, dtype=np.int64)[:, None, None, None, None, None]
        ky = np.arange(3, dtype=np.int64)[None, :, None, None, None, None]
        kx = np.arange(3, dtype=np.int64)[None, None, :, None, None, None]
        ni = np.arange(n, dtype=np.int64)[None, None, None, :, None, None]
        yi = np.arange(h, dtype=np.int64)[None, None, None, None, :, None]
        xi = np.arange(w, dtype=np.int64)[None, None, None, None, None, :]
        idx = (((ni * c + ci) * hp + (yi + ky)) * wp + (xi + kx)).reshape(c * 9, n * h * w)
        _IM2COL_IDX_CACHE[key] = idx
    return idx


def conv2d(x, weight, bias) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (shape-preserving)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError("conv2d", (x.shape,), "input must be NCHW")
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[1:] != (c, 3, 3):
        raise ShapeError("conv2d", (x.shape, weight.shape), "weight must be (F, C, 3, 3)")
    f = weight.shape[0]
    if bias.shape != (f,):
        raise ShapeError("conv2d", (weight.shape, bias.shape), "bias must be (F,)")
    cols = take_flat(pad2d(x, 1), _im2col_indices(n, c, h, w), (c * 9, n * h * w))
    out = matmul(reshape(weight, (f, c * 9)), cols)
    out = permute(reshape(out, (f, n, h, w)), (1, 0, 2, 3))
    return add(out, reshape(bias, (1, f, 1, 1)))


def avg_pool2d(x) -> Tensor:
    """2x2 average pooling with stride 2."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("avg_pool2d", (x.shape,), "expects NCHW")
    n, c, h, w = x.shape
    if h % 2 or w % 2 or h == 0 or w == 0:
        raise ShapeError("avg_pool2d", (x.shape,), "spatial extents must be even")
    r = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return tensor_mean(r, axis=(3, 5))


def instance_norm(x, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Normalize each (sample, channel) plane to zero mean, unit variance."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("instance_norm", (x.shape,), "expects NCHW")
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError("instance_norm", (x.shape,), "needs >= 1 spatial element")
    mu = tensor_mean(x, axis=(2, 3), keepdims=True)
    centered = sub(x, mu)
    var = tensor_mean(mul(centered, centered), axis=(2, 3), keepdims=True)
    return mul(centered, pow_const(add(var, Tensor(np.array(eps))), -0.5))


def grid_sample_bilinear(x, src_y, src_x) -> Tensor:
    """Resample NCHW ``x`` at fractional source coordinates, zeros outside.

    ``src_y``/``src_x`` give, per output pixel (same grid for every sample and
    channel), the source location in input pixel coordinates.  Output values
    are a fixed linear combination of input pixels, so gradients flow to ``x``.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    sy = np.asarray(src_y, dtype=np.float64).ravel()
    sx = np.asarray(src_x, dtype=np.float64).ravel()
    if sy.size != h * w or sx.size != h * w:
        raise ShapeError("grid_sample_bilinear", (x.shape,), "grid must cover H*W pixels")
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy = sy - y0
    fx = sx - x0

    rows = np.arange(n * c, dtype=np.int64)[:, None] * (h * w)
    flat = reshape(x, (n * c, h * w))
    out = None
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy <= h - 1) & (xx >= 0) & (xx <= w - 1)
            weight = (wy * wx * valid).astype(x.data.dtype)
            cols = (np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)).astype(np.int64)
            gathered = take_flat(flat, (rows + cols[None, :]).ravel(), (n * c, h * w))
            term = mul(gathered, Tensor(weight[None, :]))
            out = term if out is None else add(out, term)
    return reshape(out, (n, c, h, w))
