# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled pooling kernels; same contract as ``fsnet._pykernels``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def pool_forward(floating[:, :, ::1] feat, long long[:, ::1] bounds,
                 long long[::1] chan_base, Py_ssize_t out_channels):
    cdef Py_ssize_t C = feat.shape[0], H = feat.shape[1], W = feat.shape[2]
    cdef Py_ssize_t B = bounds.shape[0]
    cdef Py_ssize_t b, c, y, x, y0, y1, x0, x1, ch, best_idx
    cdef floating best, v
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((B, out_channels), dtype=dtype)
    arg_arr = np.empty((B, out_channels), dtype=np.int64)
    cdef floating[:, ::1] out = out_arr
    cdef long long[:, ::1] argmax = arg_arr
    with nogil:
        for b in range(B):
            y0 = bounds[b, 0]
            y1 = bounds[b, 1]
            x0 = bounds[b, 2]
            x1 = bounds[b, 3]
            for c in range(out_channels):
                ch = chan_base[b] + c
                best = feat[ch, y0, x0]
                best_idx = (ch * H + y0) * W + x0
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        v = feat[ch, y, x]
                        if v > best:
                            best = v
                            best_idx = (ch * H + y) * W + x
                out[b, c] = best
                argmax[b, c] = best_idx
    return out_arr, arg_arr


def pool_backward(floating[:, ::1] dout, long long[:, ::1] argmax, Py_ssize_t size):
    cdef Py_ssize_t B = dout.shape[0], K = dout.shape[1], b, c
    acc_arr = np.zeros(size, dtype=np.float64)
    cdef double[::1] acc = acc_arr
    with nogil:
        for b in range(B):
            for c in range(K):
                acc[argmax[b, c]] += dout[b, c]
    dtype = np.float32 if floating is float else np.float64
    return acc_arr.astype(dtype)
