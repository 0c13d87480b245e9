# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled framing kernels (im2col / col2im along the last axis)."""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def frame(const real[:, ::1] x, Py_ssize_t size, Py_ssize_t hop):
    cdef Py_ssize_t n = x.shape[0], length = x.shape[1]
    cdef Py_ssize_t t = 0 if length < size else (length - size) // hop + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, t, size), dtype=dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t i, f, k, start
    with nogil:
        for i in range(n):
            for f in range(t):
                start = f * hop
                for k in range(size):
                    o[i, f, k] = x[i, start + k]
    return out


def overlap_add(const real[:, :, ::1] frames, Py_ssize_t hop, Py_ssize_t length):
    cdef Py_ssize_t n = frames.shape[0], t = frames.shape[1], size = frames.shape[2]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, length), dtype=dtype)
    cdef real[:, ::1] o = out
    cdef Py_ssize_t i, f, k, start
    with nogil:
        for i in range(n):
            for f in range(t):
                start = f * hop
                for k in range(size):
                    o[i, start + k] += frames[i, f, k]
    return out
