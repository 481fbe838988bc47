"""Bilinear image sampling and its exact backward pass.

A sampling grid carries normalized source coordinates in [-1, 1]; the
sampler maps them affinely onto pixel centers (so -1 is the first pixel
center and +1 the last) and evaluates the bilinear kernel

    k(dx, dy) = max(0, 1 - |dx|) * max(0, 1 - |dy|)

against every image pixel. The optimized path reads only the four
neighbors of each sample point, which is exactly equivalent to the full
double sum over the image. Points outside the image sample virtual
zero-valued pixels.

The backward pass returns the gradient w.r.t. the image and w.r.t. the
normalized grid coordinates. The kernel's derivative in each axis is the
piecewise constant :func:`kernel_subgradient`; where a sample coordinate
coincides exactly with a pixel index, that pixel's contribution to the
coordinate gradient is defined as zero.
"""

from __future__ import annotations

import numpy as np

from .exceptions import NonFiniteError, ShapeError

__all__ = ["kernel_subgradient", "bilinear_sample", "bilinear_backward",
           "sample_batch", "sample_backward_batch"]


def kernel_subgradient(d):
    """Derivative of max(0, 1 - |w - x|) w.r.t. x, evaluated at d = w - x.

    Zero outside [-1, 1], +1 on (0, 1], -1 on [-1, 0), and zero at
    exactly 0 (the non-differentiable point).
    """
    d = np.asarray(d, dtype=np.float64)
    s = np.sign(d)
    return np.where(np.abs(d) > 1.0, 0.0, s)


def _to_pixel(norm, extent):
    return (norm + 1.0) * 0.5 * (extent - 1)


def _check_image(u):
    if u.ndim != 4:
        raise ShapeError(f"image must be (batch, channel, h, w), got shape {u.shape}")
    if u.shape[2] < 1 or u.shape[3] < 1:
        raise ShapeError("image spatial extents must be >= 1")


def _gather(u, yc, xc):
    """Zero-padded gather: u (B,C,H,W); yc/xc (B,N) ints -> (B,N,C)."""
    b, c, h, w = u.shape
    valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
    ycl = np.clip(yc, 0, h - 1)
    xcl = np.clip(xc, 0, w - 1)
    bidx = np.arange(b)[:, None]
    vals = u[bidx, :, ycl, xcl]
    vals *= valid[..., None]
    return vals


def sample_batch(u, xs_norm, ys_norm, out_h, out_w):
    """Bilinear sampling with per-sample coordinate arrays.

    ``u`` is (B, C, H, W); xs_norm / ys_norm are (B, N) normalized
    coordinates with N = out_h * out_w. Returns (B, C, out_h, out_w).
    """
    _check_image(u)
    b, c, h, w = u.shape
    if not (np.isfinite(xs_norm).all() and np.isfinite(ys_norm).all()):
        raise NonFiniteError("non-finite sampling coordinates")
    xp = _to_pixel(np.asarray(xs_norm, dtype=u.dtype), w)
    yp = _to_pixel(np.asarray(ys_norm, dtype=u.dtype), h)
    x0 = np.floor(xp).astype(np.int64)
    y0 = np.floor(yp).astype(np.int64)
    fx = xp - x0
    fy = yp - y0
    out = np.zeros((b, xp.shape[1], c), dtype=u.dtype)
    for yc, ky in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for xc, kx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            out += _gather(u, yc, xc) * (ky * kx)[..., None]
    return out.transpose(0, 2, 1).reshape(b, c, out_h, out_w)


def sample_backward_batch(upstream, u, xs_norm, ys_norm, need_image_grad=True):
    """Backward pass matching :func:`sample_batch`.

    ``upstream`` is (B, C, out_h, out_w). Returns
    (grad_u, dxs_norm, dys_norm) with coordinate gradients shaped (B, N),
    accumulated over channels. ``grad_u`` is None when not requested
    (the training hot path never needs gradients w.r.t. input pixels).
    """
    _check_image(u)
    b, c, h, w = u.shape
    n = xs_norm.shape[1]
    if upstream.shape[0] != b or upstream.shape[1] != c or upstream.shape[2] * upstream.shape[3] != n:
        raise ShapeError(f"upstream shape {upstream.shape} does not match image "
                         f"({b},{c},...) and grid size {n}")
    up = upstream.reshape(b, c, n).transpose(0, 2, 1)  # (B, N, C)
    xp = _to_pixel(np.asarray(xs_norm, dtype=u.dtype), w)
    yp = _to_pixel(np.asarray(ys_norm, dtype=u.dtype), h)
    x0 = np.floor(xp).astype(np.int64)
    y0 = np.floor(yp).astype(np.int64)
    fx = xp - x0
    fy = yp - y0

    # Coordinate gradients. Within a cell the kernel derivative is +1 on
    # the right neighbor column and -1 on the left; when the coordinate
    # sits exactly on a pixel index the coincident column contributes 0
    # and the column one pixel further left (at distance exactly 1) takes
    # the -1 weight, matching the literal double-sum derivative.
    x_left = x0 - (fx == 0)
    y_left = y0 - (fy == 0)
    dxp = np.zeros((b, n), dtype=u.dtype)
    dyp = np.zeros((b, n), dtype=u.dtype)
    for yc, ky in ((y0, 1.0 - fy), (y0 + 1, fy)):
        diff = _gather(u, yc, x0 + 1) - _gather(u, yc, x_left)
        dxp += (up * diff).sum(axis=2) * ky
    for xc, kx in ((x0, 1.0 - fx), (x0 + 1, fx)):
        diff = _gather(u, y0 + 1, xc) - _gather(u, y_left, xc)
        dyp += (up * diff).sum(axis=2) * kx
    dxs = dxp * (0.5 * (w - 1))
    dys = dyp * (0.5 * (h - 1))

    grad_u = None
    if need_image_grad:
        grad_u = np.zeros_like(u)
        flat = grad_u.reshape(-1)
        bidx = np.broadcast_to(np.arange(b)[:, None], (b, n))
        for yc, ky in ((y0, 1.0 - fy), (y0 + 1, fy)):
            for xc, kx in ((x0, 1.0 - fx), (x0 + 1, fx)):
                valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
                weight = (ky * kx)[..., None] * up  # (B, N, C)
                idx = ((bidx * c)[..., None] + np.arange(c)) * (h * w) \
                    + (yc * w + xc)[..., None]
                v = valid.ravel()
                contrib = np.bincount(
                    idx.reshape(b * n, c)[v].ravel(),
                    weights=weight.reshape(b * n, c)[v].ravel().astype(np.float64),
                    minlength=flat.size)
                flat += contrib.astype(u.dtype)
    return grad_u, dxs, dys


def bilinear_sample(u, grid):
    """Sample image ``u`` (B, C, H, W) at one grid shared by the batch."""
    xs = np.broadcast_to(grid.xs, (u.shape[0], grid.xs.size))
    ys = np.broadcast_to(grid.ys, (u.shape[0], grid.ys.size))
    return sample_batch(u, xs, ys, grid.out_height, grid.out_width)


def bilinear_backward(upstream, u, grid, need_image_grad=True):
    """Backward pass for :func:`bilinear_sample`.

    Returns (grad_u, dl_dxs, dl_dys); the per-pixel coordinate gradients
    are accumulated over batch and channel and refer to the normalized
    coordinates stored in the grid.
    """
    xs = np.broadcast_to(grid.xs, (u.shape[0], grid.xs.size))
    ys = np.broadcast_to(grid.ys, (u.shape[0], grid.ys.size))
    grad_u, dxs, dys = sample_backward_batch(upstream, u, xs, ys, need_image_grad)
    return grad_u, dxs.sum(axis=0), dys.sum(axis=0)
