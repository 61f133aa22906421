"""Hot inner loops for convolution and pooling.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy version.
The numba path is used when numba imports cleanly and ``CAMP_DISABLE_NUMBA``
is unset (or ``0``). Both paths accumulate in the same order, so they return
bitwise-identical results; ``tests/test_kernels.py`` checks this.

Layouts are NHWC throughout. ``im2col`` emits columns shaped
``(N, Ho, Wo, k, k, C)`` so that a reshape to ``(N*Ho*Wo, k*k*C)`` lines up
with a kernel reshaped from ``(k, k, C, C_out)``.
"""
import os

import numpy as np

_DISABLE = os.environ.get("CAMP_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError("numba disabled by CAMP_DISABLE_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def np_im2col(xpad, k, stride, out_h, out_w):
    n, _, _, c = xpad.shape
    cols = np.empty((n, out_h, out_w, k, k, c), dtype=xpad.dtype)
    span_h = stride * (out_h - 1) + 1
    span_w = stride * (out_w - 1) + 1
    for ky in range(k):
        for kx in range(k):
            cols[:, :, :, ky, kx, :] = xpad[:, ky:ky + span_h:stride, kx:kx + span_w:stride, :]
    return cols


def np_col2im(cols, padded_h, padded_w, stride):
    n, out_h, out_w, k, _, c = cols.shape
    out = np.zeros((n, padded_h, padded_w, c), dtype=cols.dtype)
    span_h = stride * (out_h - 1) + 1
    span_w = stride * (out_w - 1) + 1
    for ky in range(k):
        for kx in range(k):
            out[:, ky:ky + span_h:stride, kx:kx + span_w:stride, :] += cols[:, :, :, ky, kx, :]
    return out


def np_maxpool2x2_forward(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    # argmax returns the first maximum, i.e. row-major tie-breaking
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def np_maxpool2x2_backward(grad_out, idx):
    n, oh, ow, c = grad_out.shape
    win = np.zeros((n, oh, ow, c, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    return win.reshape(n, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * oh, 2 * ow, c)


def np_leaky_relu_forward(x, alpha):
    return np.where(x > 0, x, x * x.dtype.type(alpha))


def np_leaky_relu_backward(x, g, alpha):
    return np.where(x > 0, g, g * g.dtype.type(alpha))


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_im2col(xpad, k, stride, out_h, out_w, cols):
        n = xpad.shape[0]
        c = xpad.shape[3]
        for b in range(n):
            for oy in range(out_h):
                for ox in range(out_w):
                    for ky in range(k):
                        iy = oy * stride + ky
                        for kx in range(k):
                            ix = ox * stride + kx
                            for ch in range(c):
                                cols[b, oy, ox, ky, kx, ch] = xpad[b, iy, ix, ch]

    @njit(cache=True)
    def _nb_col2im(cols, stride, out):
        n, out_h, out_w, k, _, c = cols.shape
        # ky/kx outermost to match the numpy path's accumulation order
        for ky in range(k):
            for kx in range(k):
                for b in range(n):
                    for oy in range(out_h):
                        iy = oy * stride + ky
                        for ox in range(out_w):
                            ix = ox * stride + kx
                            for ch in range(c):
                                out[b, iy, ix, ch] += cols[b, oy, ox, ky, kx, ch]

    @njit(cache=True)
    def _nb_maxpool_fwd(x, out, idx):
        n, oh, ow, c = out.shape
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    for ch in range(c):
                        best = x[b, 2 * oy, 2 * ox, ch]
                        arg = 0
                        for j in range(1, 4):
                            v = x[b, 2 * oy + j // 2, 2 * ox + j % 2, ch]
                            if v > best:
                                best = v
                                arg = j
                        out[b, oy, ox, ch] = best
                        idx[b, oy, ox, ch] = arg

    @njit(cache=True)
    def _nb_maxpool_bwd(grad_out, idx, grad_in):
        n, oh, ow, c = grad_out.shape
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    for ch in range(c):
                        j = idx[b, oy, ox, ch]
                        grad_in[b, 2 * oy + j // 2, 2 * ox + j % 2, ch] = grad_out[b, oy, ox, ch]

    @njit(cache=True)
    def _nb_leaky_fwd(x, alpha, out):
        for i in range(x.size):
            v = x[i]
            out[i] = v if v > 0 else v * alpha

    @njit(cache=True)
    def _nb_leaky_bwd(x, g, alpha, out):
        for i in range(x.size):
            out[i] = g[i] if x[i] > 0 else g[i] * alpha

    def nb_leaky_relu_forward(x, alpha):
        x = np.ascontiguousarray(x)
        out = np.empty_like(x)
        _nb_leaky_fwd(x.reshape(-1), x.dtype.type(alpha), out.reshape(-1))
        return out

    def nb_leaky_relu_backward(x, g, alpha):
        x = np.ascontiguousarray(x)
        g = np.ascontiguousarray(g, dtype=x.dtype)
        out = np.empty_like(x)
        _nb_leaky_bwd(x.reshape(-1), g.reshape(-1), x.dtype.type(alpha), out.reshape(-1))
        return out

    def nb_im2col(xpad, k, stride, out_h, out_w):
        xpad = np.ascontiguousarray(xpad)
        cols = np.empty((xpad.shape[0], out_h, out_w, k, k, xpad.shape[3]), dtype=xpad.dtype)
        _nb_im2col(xpad, k, stride, out_h, out_w, cols)
        return cols

    def nb_col2im(cols, padded_h, padded_w, stride):
        cols = np.ascontiguousarray(cols)
        out = np.zeros((cols.shape[0], padded_h, padded_w, cols.shape[5]), dtype=cols.dtype)
        _nb_col2im(cols, stride, out)
        return out

    def nb_maxpool2x2_forward(x):
        x = np.ascontiguousarray(x)
        n, h, w, c = x.shape
        out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
        idx = np.empty((n, h // 2, w // 2, c), dtype=np.int8)
        _nb_maxpool_fwd(x, out, idx)
        return out, idx

    def nb_maxpool2x2_backward(grad_out, idx):
        grad_out = np.ascontiguousarray(grad_out)
        n, oh, ow, c = grad_out.shape
        grad_in = np.zeros((n, 2 * oh, 2 * ow, c), dtype=grad_out.dtype)
        _nb_maxpool_bwd(grad_out, np.ascontiguousarray(idx), grad_in)
        return grad_in

    im2col = nb_im2col
    col2im = nb_col2im
    maxpool2x2_forward = nb_maxpool2x2_forward
    maxpool2x2_backward = nb_maxpool2x2_backward
    leaky_relu_forward = nb_leaky_relu_forward
    leaky_relu_backward = nb_leaky_relu_backward
    BACKEND = "numba"
else:
    im2col = np_im2col
    col2im = np_col2im
    maxpool2x2_forward = np_maxpool2x2_forward
    maxpool2x2_backward = np_maxpool2x2_backward
    leaky_relu_forward = np_leaky_relu_forward
    leaky_relu_backward = np_leaky_relu_backward
    BACKEND = "numpy"
