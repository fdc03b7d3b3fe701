# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution, pooling and dense kernels for the network engine.

All kernels work on C-contiguous float64 arrays and reduce in a fixed loop
order, so results do not depend on thread count. Signatures mirror
``obalex._pykernels``.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _lo(Py_ssize_t pad, Py_ssize_t k, Py_ssize_t stride) nogil:
    # first output index whose input index o*stride - pad + k is >= 0
    cdef Py_ssize_t num = pad - k
    if num <= 0:
        return 0
    return (num + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t size, Py_ssize_t pad, Py_ssize_t k,
                           Py_ssize_t stride, Py_ssize_t out) nogil:
    # one past the last output index whose input index is < size
    cdef Py_ssize_t num = size - 1 + pad - k
    if num < 0:
        return 0
    cdef Py_ssize_t h = num // stride + 1
    return h if h < out else out


cdef void _conv_row_acc(double* orow, const double* xrow, double wv, Py_ssize_t x0,
                        Py_ssize_t x1, Py_ssize_t stride, Py_ssize_t off) noexcept nogil:
    cdef Py_ssize_t ox
    if stride == 1:
        for ox in range(x0, x1):
            orow[ox] += wv * xrow[ox + off]
    else:
        for ox in range(x0, x1):
            orow[ox] += wv * xrow[ox * stride + off]


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Ho = (H + 2 * pad - K) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - K) // stride + 1
    out_arr = np.empty((N, F, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, f, c, ky, kx, oy, ox, y0, y1, x0, x1
    cdef double wv
    cdef double* orow
    with nogil:
        for n in range(N):
            for f in range(F):
                for oy in range(Ho):
                    for ox in range(Wo):
                        out[n, f, oy, ox] = b[f]
                for c in range(C):
                    for ky in range(K):
                        y0 = _lo(pad, ky, stride)
                        y1 = _hi(H, pad, ky, stride, Ho)
                        for kx in range(K):
                            x0 = _lo(pad, kx, stride)
                            x1 = _hi(W, pad, kx, stride, Wo)
                            wv = w[f, c, ky, kx]
                            for oy in range(y0, y1):
                                orow = &out[n, f, oy, 0]
                                _conv_row_acc(orow, &x[n, c, oy * stride - pad + ky, 0], wv,
                                              x0, x1, stride, kx - pad)
    return out_arr


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] dout, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Ho = dout.shape[2], Wo = dout.shape[3]
    dx_arr = np.zeros((N, C, H, W), dtype=np.float64)
    dw_arr = np.zeros((F, C, K, K), dtype=np.float64)
    db_arr = np.zeros(F, dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t n, f, c, ky, kx, oy, ox, y0, y1, x0, x1, iy, off
    cdef double wv, acc
    cdef const double* grow
    cdef const double* xrow
    cdef double* dxrow
    with nogil:
        for n in range(N):
            for f in range(F):
                acc = 0.0
                for oy in range(Ho):
                    for ox in range(Wo):
                        acc = acc + dout[n, f, oy, ox]
                db[f] += acc
                for c in range(C):
                    for ky in range(K):
                        y0 = _lo(pad, ky, stride)
                        y1 = _hi(H, pad, ky, stride, Ho)
                        for kx in range(K):
                            x0 = _lo(pad, kx, stride)
                            x1 = _hi(W, pad, kx, stride, Wo)
                            off = kx - pad
                            wv = w[f, c, ky, kx]
                            acc = 0.0
                            for oy in range(y0, y1):
                                iy = oy * stride - pad + ky
                                grow = &dout[n, f, oy, 0]
                                xrow = &x[n, c, iy, 0]
                                dxrow = &dx[n, c, iy, 0]
                                if stride == 1:
                                    for ox in range(x0, x1):
                                        acc = acc + grow[ox] * xrow[ox + off]
                                        dxrow[ox + off] += wv * grow[ox]
                                else:
                                    for ox in range(x0, x1):
                                        acc = acc + grow[ox] * xrow[ox * stride + off]
                                        dxrow[ox * stride + off] += wv * grow[ox]
                            dw[f, c, ky, kx] += acc
    return dx_arr, dw_arr, db_arr


def maxpool_forward(const double[:, :, :, ::1] x, Py_ssize_t size, Py_ssize_t stride):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H - size) // stride + 1
    cdef Py_ssize_t Wo = (W - size) // stride + 1
    out_arr = np.empty((N, C, Ho, Wo), dtype=np.float64)
    arg_arr = np.empty((N, C, Ho, Wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, c, oy, ox, py, px, iy, ix, best_i
    cdef double best, v
    with nogil:
        for n in range(N):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        iy = oy * stride
                        ix = ox * stride
                        best = x[n, c, iy, ix]
                        best_i = iy * W + ix
                        for py in range(size):
                            for px in range(size):
                                v = x[n, c, iy + py, ix + px]
                                # strict > keeps the first maximum in row-major order
                                if v > best:
                                    best = v
                                    best_i = (iy + py) * W + ix + px
                        out[n, c, oy, ox] = best
                        arg[n, c, oy, ox] = best_i
    return out_arr, arg_arr


def maxpool_backward(const double[:, :, :, ::1] dout, const cnp.int64_t[:, :, :, ::1] arg,
                     tuple x_shape):
    cdef Py_ssize_t N = dout.shape[0], C = dout.shape[1], Ho = dout.shape[2], Wo = dout.shape[3]
    cdef Py_ssize_t W = x_shape[3]
    dx_arr = np.zeros(x_shape, dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, c, oy, ox, idx
    with nogil:
        for n in range(N):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        idx = arg[n, c, oy, ox]
                        dx[n, c, idx // W, idx % W] += dout[n, c, oy, ox]
    return dx_arr


def dense_forward(const double[:, ::1] x, const double[:, ::1] w, const double[::1] b):
    cdef Py_ssize_t N = x.shape[0], I = x.shape[1], O = w.shape[0]
    out_arr = np.empty((N, O), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, o, i
    cdef double acc
    with nogil:
        for n in range(N):
            for o in range(O):
                acc = b[o]
                for i in range(I):
                    acc = acc + w[o, i] * x[n, i]
                out[n, o] = acc
    return out_arr


def dense_backward(const double[:, ::1] x, const double[:, ::1] w, const double[:, ::1] dout):
    cdef Py_ssize_t N = x.shape[0], I = x.shape[1], O = w.shape[0]
    dx_arr = np.zeros((N, I), dtype=np.float64)
    dw_arr = np.zeros((O, I), dtype=np.float64)
    db_arr = np.zeros(O, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t n, o, i
    cdef double g
    with nogil:
        for n in range(N):
            for o in range(O):
                g = dout[n, o]
                db[o] += g
                for i in range(I):
                    dw[o, i] += g * x[n, i]
                    dx[n, i] += g * w[o, i]
    return dx_arr, dw_arr, db_arr
