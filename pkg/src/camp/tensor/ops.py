"""Differentiable layer primitives (NHWC layout).

Covers what the two CAMP networks need and nothing more: convolution,
transposed convolution, 2x2 max pooling, dense, batch normalization,
LeakyReLU, sigmoid, dropout and reshapes.
"""
from __future__ import annotations

import numpy as np

from .. import _kernels
from .tape import Tensor, as_tensor, record


def same_padding(n, k, stride):
    """Output size and (before, after) zero padding for "same" convolution.

    Output is ``ceil(n / stride)``; an odd amount of padding puts the extra
    row/column at the bottom/right.
    """
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def _check_stride(stride):
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    return int(stride)


def conv2d(x, kernel, bias, stride=1, padding="same"):
    """Cross-correlation of ``x[N,H,W,C]`` with ``kernel[k,k,C,C_out]`` plus bias."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    stride = _check_stride(stride)
    n, h, w, c = x.shape
    k, k2, c_in, c_out = kernel.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {kernel.shape}")
    if c != c_in:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if padding == "same":
        ho, pt, pb = same_padding(h, k, stride)
        wo, pl, pr = same_padding(w, k, stride)
    elif padding == "valid":
        if h < k or w < k:
            raise ValueError(f"input {h}x{w} smaller than kernel {k}x{k} for valid padding")
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    xd = x.data
    if pt or pb or pl or pr:
        xd = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    hp, wp = xd.shape[1], xd.shape[2]
    cols = _kernels.im2col(xd, k, stride, ho, wo).reshape(n * ho * wo, k * k * c)
    w2 = kernel.data.reshape(k * k * c, c_out)
    y = (cols @ w2).reshape(n, ho, wo, c_out)
    y += bias.data
    out = Tensor(y)

    def backward(g):
        g2 = g.reshape(-1, c_out)
        dw = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        dx = None
        if x.requires_grad and stride == 1 and c_out < c:
            # full correlation of g with the flipped kernel; cheaper when c_out < c
            gpad = np.pad(g, ((0, 0), (k - 1 - pt, k - 1 - pb), (k - 1 - pl, k - 1 - pr), (0, 0)))
            gcols = _kernels.im2col(gpad, k, 1, h, w).reshape(n * h * w, k * k * c_out)
            wflip = np.ascontiguousarray(kernel.data[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(k * k * c_out, c)
            dx = (gcols @ wflip).reshape(n, h, w, c)
        elif x.requires_grad:
            dcols = (g2 @ w2.T).reshape(n, ho, wo, k, k, c)
            dpad = _kernels.col2im(dcols, hp, wp, stride)
            dx = dpad[:, pt:pt + h, pl:pl + w, :]
        return dx, dw, db

    return record("conv2d", (x, kernel, bias), out, backward)


def conv2d_transpose(x, kernel, bias, stride=2):
    """Fractionally-strided convolution: ``x[N,H,W,C_in]`` -> ``[N,H*s,W*s,C_out]``.

    Exactly the adjoint of a "same" :func:`conv2d` with stride ``s`` taking an
    ``H*s x W*s`` image to ``H x W`` whose kernel is ``kernel`` with its two
    channel axes swapped.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    stride = _check_stride(stride)
    n, h, w, c_in = x.shape
    k, k2, kc_in, c_out = kernel.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {kernel.shape}")
    if c_in != kc_in:
        raise ValueError(f"channel mismatch: input has {c_in}, kernel expects {kc_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
    ho, wo = h * stride, w * stride
    _, pt, pb = same_padding(ho, k, stride)
    _, pl, pr = same_padding(wo, k, stride)
    hp = max(ho + pt + pb, stride * (h - 1) + k)
    wp = max(wo + pl + pr, stride * (w - 1) + k)

    kp = np.ascontiguousarray(kernel.data.transpose(2, 0, 1, 3)).reshape(c_in, k * k * c_out)
    x2 = x.data.reshape(-1, c_in)
    cols = (x2 @ kp).reshape(n, h, w, k, k, c_out)
    full = _kernels.col2im(cols, hp, wp, stride)
    y = full[:, pt:pt + ho, pl:pl + wo, :] + bias.data
    out = Tensor(np.ascontiguousarray(y))

    def backward(g):
        gp = np.pad(g, ((0, 0), (pt, hp - pt - ho), (pl, wp - pl - wo), (0, 0)))
        gcols = _kernels.im2col(gp, k, stride, h, w).reshape(n * h * w, k * k * c_out)
        dx = (gcols @ kp.T).reshape(x.shape) if x.requires_grad else None
        dk = None
        if kernel.requires_grad:
            dk = (x2.T @ gcols).reshape(c_in, k, k, c_out).transpose(1, 2, 0, 3)
        db = g.sum(axis=(0, 1, 2)) if bias.requires_grad else None
        return dx, dk, db

    return record("conv2d_transpose", (x, kernel, bias), out, backward)


def maxpool2d(x, window=2, stride=2):
    """2x2 / stride-2 max pooling; ties go to the first element in row-major order."""
    x = as_tensor(x)
    if window != 2 or stride != 2:
        raise ValueError("only 2x2 windows with stride 2 are supported")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max pooling needs even spatial dimensions, got {h}x{w}")
    y, idx = _kernels.maxpool2x2_forward(x.data)
    out = Tensor(y)

    def backward(g):
        return (_kernels.maxpool2x2_backward(g, idx),)

    return record("maxpool2d", (x,), out, backward, argmax=idx)


def dense(x, weights, bias):
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.data.ndim != 2:
        raise ValueError(f"dense expects [N, F] input, got {x.shape}")
    f, u = weights.shape
    if x.shape[1] != f:
        raise ValueError(f"dimension mismatch: input has {x.shape[1]} features, weights expect {f}")
    if bias.shape != (u,):
        raise ValueError(f"bias shape {bias.shape} does not match {u} units")
    out = Tensor(x.data @ weights.data + bias.data)

    def backward(g):
        dx = g @ weights.data.T if x.requires_grad else None
        dw = x.data.T @ g if weights.requires_grad else None
        db = g.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    return record("dense", (x, weights, bias), out, backward)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Per-channel batch normalization.

    In training mode the batch statistics normalize ``x`` and the running
    arrays are updated in place (``running = momentum*running + (1-momentum)*batch``,
    biased variance). In inference mode the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    axes = tuple(range(x.data.ndim - 1))
    m = x.size // c
    dt = x.dtype
    if training:
        if m < 2:
            raise ValueError("batch normalization in training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = np.asarray(running_mean, dtype=dt)
        var = np.asarray(running_var, dtype=dt)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mean) * inv_std
    out = Tensor(gamma.data * xhat + beta.data)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            else:
                dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return record("batchnorm2d", (x, gamma, beta), out, backward, mean=mean, var=var)


def leaky_relu(x, alpha=0.01):
    x = as_tensor(x)
    out = Tensor(_kernels.leaky_relu_forward(x.data, alpha))

    def backward(g):
        return (_kernels.leaky_relu_backward(x.data, g, alpha),)

    return record("leaky_relu", (x,), out, backward)


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    y = _stable_sigmoid(x.data)
    out = Tensor(y)

    def backward(g):
        return (g * y * (1.0 - y),)

    return record("sigmoid", (x,), out, backward)


def dropout(x, rate, training, rng):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = Tensor(x.data * mask)

    def backward(g):
        return (g * mask,)

    return record("dropout", (x,), out, backward, mask=mask)


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), out, backward)


def flatten(x):
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        ga = g if a.data.shape == g.shape else np.sum(g).reshape(a.data.shape)
        gb = g if b.data.shape == g.shape else np.sum(g).reshape(b.data.shape)
        return ga, gb

    return record("add", (a, b), out, backward)


def weighted_sum(x, weights):
    """``sum(x * weights)`` as a scalar; handy for projecting outputs to a loss."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)
    out = Tensor(np.sum(x.data * w))

    def backward(g):
        return (np.broadcast_to(g * w, x.shape),)

    return record("weighted_sum", (x,), out, backward)
