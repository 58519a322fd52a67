# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled FPC inner loop.

Mirrors ``deepfpc._pykernels``; the two agree to rounding (the summation
order of the matrix-vector products differs from BLAS).
"""
import numpy as np

from libc.math cimport sqrt, fabs


cdef double _shrink(const double[::1] v, double[::1] out, double nu) noexcept nogil:
    cdef Py_ssize_t j
    cdef double a, sq = 0.0
    for j in range(v.shape[0]):
        a = fabs(v[j]) - nu
        if a > 0.0:
            out[j] = a if v[j] > 0.0 else -a
            sq += a * a
        else:
            out[j] = 0.0
    return sq


cdef int _iterate(const double[:, ::1] phi, const double[::1] y, double[::1] x,
                  double tau, double nu, Py_ssize_t iters,
                  double[::1] g, double[::1] v, double[::1] u) noexcept nogil:
    cdef Py_ssize_t m = phi.shape[0]
    cdef Py_ssize_t n = phi.shape[1]
    cdef Py_ssize_t it, i, j
    cdef double s, r, sq, scale
    cdef int degenerate = 0
    for it in range(iters):
        for j in range(n):
            g[j] = 0.0
        for i in range(m):
            s = 0.0
            for j in range(n):
                s += phi[i, j] * x[j]
            r = (1.0 if s > 0.0 else -1.0) - y[i]
            if r != 0.0:
                for j in range(n):
                    g[j] += r * phi[i, j]
        for j in range(n):
            v[j] = x[j] - tau * g[j]
        sq = _shrink(v, u, nu)
        if sq == 0.0:
            sq = _shrink(v, u, 0.5 * nu)
        if sq == 0.0:
            degenerate += 1
            continue
        scale = 1.0 / sqrt(sq)
        for j in range(n):
            x[j] = u[j] * scale
    return degenerate


def fpc_iterations(const double[:, ::1] phi, const double[::1] y, double[::1] x,
                   double tau, double nu, Py_ssize_t iters):
    """Run ``iters`` FPC updates on ``x`` in place; return the degenerate-step count."""
    cdef Py_ssize_t n = phi.shape[1]
    cdef double[::1] g = np.empty(n)
    cdef double[::1] v = np.empty(n)
    cdef double[::1] u = np.empty(n)
    cdef int flagged
    with nogil:
        flagged = _iterate(phi, y, x, tau, nu, iters, g, v, u)
    return flagged


def fpc_iterations_rows(const double[:, ::1] phi, const double[:, ::1] ys, double[:, ::1] xs,
                        double tau, double nu, Py_ssize_t iters):
    """Row-wise ``fpc_iterations`` over independent problems sharing ``phi``."""
    cdef Py_ssize_t n = phi.shape[1]
    cdef Py_ssize_t rows = ys.shape[0]
    cdef Py_ssize_t t
    cdef double[::1] g = np.empty(n)
    cdef double[::1] v = np.empty(n)
    cdef double[::1] u = np.empty(n)
    flags = np.zeros(rows, dtype=np.int64)
    cdef long long[::1] fl = flags
    with nogil:
        for t in range(rows):
            fl[t] = _iterate(phi, ys[t], xs[t], tau, nu, iters, g, v, u)
    return flags
