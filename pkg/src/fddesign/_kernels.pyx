# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the propensity design (see ``_kernels_py`` for the reference)."""
import numpy as np
from libc.math cimport sqrt, INFINITY


cdef inline void _point(double g1, double g2, double c1, double c2, double eg2,
                        double ec2, double lam, double floor,
                        double* p1, double* p2) noexcept nogil:
    cdef double a, b, ratio
    if g1 < lam * c1:
        a = sqrt(g1 / (lam * c1))
        b = sqrt((g1 + eg2) / (lam * (c1 + ec2)))
        p1[0] = a if a > b else b
        if p1[0] > 1.0:
            p1[0] = 1.0
        if g2 <= 0.0:
            p2[0] = 0.0
        elif g1 <= 0.0 or c2 <= 0.0:
            p2[0] = 1.0
        else:
            ratio = sqrt(g2 * c1 / (g1 * c2))
            p2[0] = ratio if ratio < 1.0 else 1.0
    else:
        p1[0] = 1.0
        if g2 <= 0.0:
            p2[0] = 0.0
        elif c2 <= 0.0:
            p2[0] = 1.0
        else:
            ratio = sqrt(g2 / (lam * c2))
            p2[0] = ratio if ratio < 1.0 else 1.0
    if p1[0] < floor:
        p1[0] = floor
    if p2[0] < floor:
        p2[0] = floor


def closed_form(const double[::1] g1, const double[::1] g2, const double[::1] c1,
                const double[::1] c2, const double[::1] eg2, const double[::1] ec2,
                double lam, double floor):
    cdef Py_ssize_t i, n = g1.shape[0]
    out1 = np.empty(n)
    out2 = np.empty(n)
    cdef double[::1] o1 = out1
    cdef double[::1] o2 = out2
    with nogil:
        for i in range(n):
            _point(g1[i], g2[i], c1[i], c2[i], eg2[i], ec2[i], lam, floor, &o1[i], &o2[i])
    return out1, out2


def totals(const double[::1] g1, const double[::1] g2, const double[::1] c1,
           const double[::1] c2, const double[::1] eg2, const double[::1] ec2,
           const double[::1] w, double lam, double floor):
    """Weighted sums ``(sum w, sum w*cost, sum w*var, sum w*var**2)`` without temporaries."""
    cdef Py_ssize_t i, n = g1.shape[0]
    cdef double p1, p2, v, sw = 0.0, sc = 0.0, sv = 0.0, sv2 = 0.0
    with nogil:
        for i in range(n):
            _point(g1[i], g2[i], c1[i], c2[i], eg2[i], ec2[i], lam, floor, &p1, &p2)
            v = g1[i] / p1 + g2[i] / (p1 * p2)
            sw += w[i]
            sc += w[i] * (p1 * c1[i] + p1 * p2 * c2[i])
            sv += w[i] * v
            sv2 += w[i] * v * v
    return sw, sc, sv, sv2


def cond_norm_mean(const double[::1] base_sq, const double[:, ::1] mean_M,
                   const double[:, ::1] pool):
    """``mean_k sqrt(base_sq[i] + ||mean_M[i] + pool[k]||^2)`` for every ``i``."""
    cdef Py_ssize_t i, k, j, n = mean_M.shape[0], K = pool.shape[0], d = pool.shape[1]
    cdef double acc, s, t
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            acc = 0.0
            for k in range(K):
                s = base_sq[i]
                for j in range(d):
                    t = mean_M[i, j] + pool[k, j]
                    s += t * t
                acc += sqrt(s)
            o[i] = acc / K
    return out
