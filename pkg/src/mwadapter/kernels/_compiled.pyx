# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels; drop-in for ``_reference``.

Row reductions accumulate in double precision in a fixed left-to-right order,
so results are reproducible run to run for either input dtype.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654


def layer_norm_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef double mu, var, r, c
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(d):
                c = (x[i, j] - mu) * r
                xhat[i, j] = <real>c
                y[i, j] = <real>(c * gamma[j] + beta[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dg = np.zeros(d, dtype=np.float64)
    cdef double[::1] db = np.zeros(d, dtype=np.float64)
    cdef double m1, m2, g
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = dy[i, j] * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
                dg[j] += dy[i, j] * xhat[i, j]
                db[j] += dy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                g = dy[i, j] * gamma[j]
                dx[i, j] = <real>((g - m1 - xhat[i, j] * m2) * rstd[i])
    return dx_arr, np.asarray(dg).astype(dtype), np.asarray(db).astype(dtype)


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef double m, s, e
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = exp(x[i, j] - m)
                y[i, j] = <real>e
                s += e
            for j in range(d):
                y[i, j] = <real>(y[i, j] / s)
    return y_arr


def softmax_backward(real[:, ::1] y, real[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += dy[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = <real>(y[i, j] * (dy[i, j] - s))
    return dx_arr


def gelu_forward(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    t_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] t = t_arr
    cdef double v, th
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                th = tanh(GELU_C * (v + 0.044715 * v * v * v))
                t[i, j] = <real>th
                y[i, j] = <real>(0.5 * v * (1.0 + th))
    return y_arr, t_arr


def gelu_backward(real[:, ::1] x, real[:, ::1] t, real[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef double v, th
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                th = t[i, j]
                dx[i, j] = <real>(dy[i, j] * (0.5 * (1.0 + th)
                    + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3 * 0.044715 * v * v)))
    return dx_arr


def diagonal_ranks(real[:, ::1] s):
    cdef Py_ssize_t n = s.shape[0], m = s.shape[1], i, j
    out_arr = np.zeros(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef real v
    with nogil:
        for i in range(n):
            v = s[i, i]
            for j in range(m):
                if s[i, j] > v or (s[i, j] == v and j < i):
                    out[i] += 1
    return out_arr
