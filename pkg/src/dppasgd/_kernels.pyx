# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled training kernels. Same API as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs, isfinite

cnp.import_array()

LOGISTIC = 0
HINGE = 1
DIVERGENCE_LIMIT = 1e8


cdef inline double _coef(int kind, double margin, double label) nogil:
    cdef double e
    if kind == 0:
        # -y * sigmoid(-margin), evaluated without overflow
        if margin > 0:
            e = exp(-margin)
            return -label * e / (1.0 + e)
        return -label / (1.0 + exp(margin))
    if margin <= 1.0:
        return -label
    return 0.0


def sample_coefficients(int kind, double[::1] theta, double[:, ::1] X, double[::1] y):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j
    cdef double dot
    out = np.empty(n)
    cdef double[::1] c = out
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += X[i, j] * theta[j]
            c[i] = _coef(kind, y[i] * dot, y[i])
    return out


def per_sample_gradients(int kind, double[::1] theta, double[:, ::1] X, double[::1] y, double l2):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j
    coef = sample_coefficients(kind, theta, X, y)
    cdef double[::1] c = coef
    out = np.empty((n, d))
    cdef double[:, ::1] g = out
    with nogil:
        for i in range(n):
            for j in range(d):
                g[i, j] = c[i] * X[i, j] + l2 * theta[j]
    return out


cdef void _clipped_gradient(int kind, double[::1] theta, double[:, ::1] X, double[::1] y,
                            cnp.int64_t[::1] idx, double clip, double l2,
                            double[::1] acc) noexcept nogil:
    cdef Py_ssize_t b = idx.shape[0], d = X.shape[1], i, j, row
    cdef double dot, c, norm_sq, scale, scale_sum = 0.0, theta_sq = 0.0, x_sq
    for j in range(d):
        acc[j] = 0.0
        theta_sq += theta[j] * theta[j]
    for i in range(b):
        row = idx[i]
        dot = 0.0
        x_sq = 0.0
        for j in range(d):
            dot += X[row, j] * theta[j]
            x_sq += X[row, j] * X[row, j]
        c = _coef(kind, y[row] * dot, y[row])
        # |c x + l2 theta|^2 expanded so the per-sample vector is never stored
        norm_sq = c * c * x_sq + 2.0 * c * l2 * dot + l2 * l2 * theta_sq
        if norm_sq > clip * clip:
            scale = clip / sqrt(norm_sq)
        else:
            scale = 1.0
        scale_sum += scale
        c *= scale
        for j in range(d):
            acc[j] += c * X[row, j]
    for j in range(d):
        acc[j] = (acc[j] + l2 * scale_sum * theta[j]) / b


def clipped_gradient(int kind, double[::1] theta, double[:, ::1] X, double[::1] y,
                     cnp.int64_t[::1] idx, double clip, double l2):
    out = np.empty(X.shape[1])
    cdef double[::1] acc = out
    with nogil:
        _clipped_gradient(kind, theta, X, y, idx, clip, l2, acc)
    return out


def local_steps(int kind, theta_in, double[:, ::1] X, double[::1] y,
                cnp.int64_t[:, ::1] batches, double[:, ::1] noise,
                double eta, double clip, double l2):
    cdef Py_ssize_t steps = batches.shape[0], d = X.shape[1], s, j
    out = np.array(theta_in, dtype=np.float64, copy=True)
    cdef double[::1] theta = out
    grad = np.empty(d)
    cdef double[::1] g = grad
    cdef bint bad
    with nogil:
        for s in range(steps):
            _clipped_gradient(kind, theta, X, y, batches[s], clip, l2, g)
            bad = False
            for j in range(d):
                theta[j] -= eta * (g[j] + noise[s, j])
                if not isfinite(theta[j]) or fabs(theta[j]) > 1e8:
                    bad = True
            if bad:
                with gil:
                    return out, s
    return out, steps
