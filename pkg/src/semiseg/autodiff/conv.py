"""Convolution kernels on raw arrays.

The fast path lowers convolution to one GEMM through a patch matrix
(im2col). ``conv2d_reference`` and ``conv_transpose2d_reference`` are the
explicit-loop definitions used as oracles in tests; keep them naive.
"""

from __future__ import annotations

import numpy as np


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def transpose_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Patch matrix of shape (C*kh*kw, N*Ho*Wo)."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3)
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i_end:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to an image batch."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            out[:, :, i:i_end:stride, j:j + stride * wo:stride] += cols[:, i, j]
    out = out.transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    """Cross-correlation without bias. Returns (output, patch matrix)."""
    n = x.shape[0]
    f, c, kh, kw = w.shape
    ho = conv_output_size(x.shape[2], kh, stride, pad)
    wo = conv_output_size(x.shape[3], kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad)
    out = w.reshape(f, -1) @ cols
    return out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3), cols


def conv2d_grad_input(dy: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    f, c, kh, kw = w.shape
    dy2 = dy.transpose(1, 0, 2, 3).reshape(f, -1)
    dcols = w.reshape(f, -1).T @ dy2
    return col2im(dcols, x_shape, kh, kw, stride, pad)


def conv2d_grad_weight(cols: np.ndarray, dy: np.ndarray, w_shape) -> np.ndarray:
    f = w_shape[0]
    dy2 = dy.transpose(1, 0, 2, 3).reshape(f, -1)
    return (dy2 @ cols.T).reshape(w_shape)


# ----------------------------------------------------------------------
# explicit-loop references


def conv2d_reference(x, w, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((n, f, ho, wo), dtype=np.float64)
    for bi in range(n):
        for fi in range(f):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if b is None else float(b[fi])
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[bi, ci, oy * stride + ky, ox * stride + kx] * w[fi, ci, ky, kx]
                    out[bi, fi, oy, ox] = acc
    return out


def conv_transpose2d_reference(x, w, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    n, c, h, wd = x.shape
    _, f, kh, kw = w.shape
    ho = transpose_output_size(h, kh, stride, pad)
    wo = transpose_output_size(wd, kw, stride, pad)
    full = np.zeros((n, f, (h - 1) * stride + kh, (wd - 1) * stride + kw), dtype=np.float64)
    for bi in range(n):
        for ci in range(c):
            for iy in range(h):
                for ix in range(wd):
                    v = x[bi, ci, iy, ix]
                    for fi in range(f):
                        for ky in range(kh):
                            for kx in range(kw):
                                full[bi, fi, iy * stride + ky, ix * stride + kx] += v * w[ci, fi, ky, kx]
    out = full[:, :, pad:pad + ho, pad:pad + wo]
    if b is not None:
        out = out + np.asarray(b, dtype=np.float64).reshape(1, -1, 1, 1)
    return out
