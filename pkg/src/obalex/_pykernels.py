"""Pure-numpy kernels; same signatures and semantics as the compiled core."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, K, K)


def conv2d_forward(x, w, b, stride, pad):
    win = _windows(x, w.shape[2], stride, pad)
    out = np.einsum("nchwkl,fckl->nfhw", win, w, optimize=True)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, dout, stride, pad):
    n, c, h, wd = x.shape
    k = w.shape[2]
    win = _windows(x, k, stride, pad)
    dw = np.einsum("nchwkl,nfhw->fckl", win, dout, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    # scatter each kernel tap back onto the padded input
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    ho, wo = dout.shape[2], dout.shape[3]
    for ky in range(k):
        for kx in range(k):
            contrib = np.einsum("nfhw,fc->nchw", dout, w[:, :, ky, kx], optimize=True)
            dxp[:, :, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride] += contrib
    dx = dxp[:, :, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(dx), dw, db


def maxpool_forward(x, size, stride):
    n, c, h, w = x.shape
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, size * size)
    local = flat.argmax(axis=-1)  # first maximum, row-major, like the compiled kernel
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // size
    cols = np.arange(wo)[None, :] * stride + local % size
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(dout, arg, x_shape):
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h * w))
    np.add.at(dx, (np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None], arg), dout)
    return dx.reshape(x_shape)


def dense_forward(x, w, b):
    return x @ w.T + b


def dense_backward(x, w, dout):
    return dout @ w, dout.T @ x, dout.sum(axis=0)
