"""Differentiable operations over :class:`Tensor`."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import conv as _conv
from .tensor import ShapeError, Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        # python scalars should not upcast float32 activations
        if a.node is None and not a.requires_grad and a.size == 1:
            a = Tensor(a.data, dtype=b.dtype)
        elif b.node is None and not b.requires_grad and b.size == 1:
            b = Tensor(b.data, dtype=a.dtype)
    return a, b


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return make_result(ad / bd, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(ad ** exponent, (a,),
                       lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# -- reductions and shape ----------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return make_result(out, (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1)
    return make_result(out, (a,),
                       lambda g: (_expand_reduced(g / count, shape, axis, keepdims),), "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(np.asarray(a.data[index]), (a,), bw, "getitem")


def _needs_add_at(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -- activations -------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    # derivative at exactly 0 is taken from the negative side (0)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    # derivative at exactly 0 is taken from the negative side (slope)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


# -- softmax family ----------------------------------------------------


def logsumexp(x, axis: int = 1, mask: Optional[np.ndarray] = None, keepdims: bool = False) -> Tensor:
    """log Σ exp(x) along ``axis``, optionally restricted to entries where ``mask`` is true.

    ``mask`` broadcasts against ``x``; every reduced slice must keep at least
    one entry. Excluded entries receive exactly zero gradient.
    """
    x = as_tensor(x)
    xd = x.data
    if mask is None:
        m = xd.max(axis=axis, keepdims=True)
        e = np.exp(xd - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("logsumexp mask leaves an empty slice")
        m = np.where(mask, xd, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, xd - m, 0)), 0).astype(xd.dtype)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    weights = e / s
    if not keepdims:
        out = out.squeeze(axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return make_result(out, (x,), bw, "logsumexp")


def log_softmax(x, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return make_result(out, (x,),
                       lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(x, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return make_result(out, (x,),
                       lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def softmax_channels(logits) -> Tensor:
    """Per-pixel softmax over axis 1 of an (N, C, H, W) volume."""
    logits = as_tensor(logits)
    if logits.ndim != 4 or logits.shape[1] < 2:
        raise ShapeError(f"softmax_channels expects (N, C>=2, H, W), got {logits.shape}")
    return softmax(logits, axis=1)


# -- convolution -------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeError(f"conv2d kernel {weight.shape} larger than padded input {x.shape} (pad={pad})")
    out, cols = _conv.conv2d_forward(x.data, weight.data, stride, pad)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data.reshape(1, -1, 1, 1)
        inputs.append(bias)
    xs, wd = x.shape, weight.data

    def bw(g):
        gx = _conv.conv2d_grad_input(g, wd, xs, stride, pad) if x.requires_grad else None
        gw = _conv.conv2d_grad_weight(cols, g, wd.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(np.ascontiguousarray(out), inputs, bw, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` has shape (C_in, C_out, kh, kw).

    Computed as the input-gradient of a conv2d with the same weight, so the
    two are exact adjoints.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv_transpose2d stride must be >= 1, got {stride}")
    n, _, h, w = x.shape
    _, f, kh, kw = weight.shape
    ho = _conv.transpose_output_size(h, kh, stride, pad)
    wo = _conv.transpose_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d output extent ({ho}, {wo}) is not positive")
    out_shape = (n, f, ho, wo)
    wd = weight.data
    out = _conv.conv2d_grad_input(x.data, wd, out_shape, stride, pad)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv_transpose2d bias shape {bias.shape} != ({f},)")
        out = out + bias.data.reshape(1, -1, 1, 1)
        inputs.append(bias)
    xd = x.data

    def bw(g):
        gx = gw = None
        if x.requires_grad or weight.requires_grad:
            gx, cols = _conv.conv2d_forward(g, wd, stride, pad)
            if weight.requires_grad:
                gw = _conv.conv2d_grad_weight(cols, xd, wd.shape)
            gx = np.ascontiguousarray(gx) if x.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, inputs, bw, "conv_transpose2d")


# -- normalization -----------------------------------------------------


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization of an (N, C, H, W) tensor.

    In training mode the running statistics are updated in place (unbiased
    variance, exponential moving average with ``momentum``).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d shapes: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, -1, 1, 1)
    if training:
        count = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if count < 2:
            raise ShapeError(f"batchnorm2d in training mode needs N*H*W >= 2, got {count}")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = xd.var(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * count / (count - 1)
    else:
        mu = running_mean.reshape(1, -1, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, -1, 1, 1).astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = gd * xhat + beta.data.reshape(1, -1, 1, 1)

    def bw(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gd
        if training:
            gx = inv_std * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv_std
        return gx.astype(xd.dtype), ggamma, gbeta

    return make_result(out.astype(xd.dtype), (x, gamma, beta), bw, "batchnorm2d")
