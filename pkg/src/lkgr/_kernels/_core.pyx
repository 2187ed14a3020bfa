# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels; same contracts as ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, cosh, sinh, acosh, asinh

cnp.import_array()

ARCOSH_FLOOR = 1.0 + 1e-15
ZERO_NORM = 1e-12
NEAR = 2.0

cdef double _FLOOR = 1.0 + 1e-15
cdef double _ZERO = 1e-12
cdef double _NEAR = 2.0


cdef inline double _mink(const double[:, ::1] x, const double[:, ::1] y, Py_ssize_t i) nogil:
    cdef Py_ssize_t k
    cdef double s = -x[i, 0] * y[i, 0]
    for k in range(1, x.shape[1]):
        s += x[i, k] * y[i, k]
    return s


def minkowski_rows(const double[:, ::1] x, const double[:, ::1] y):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _mink(x, y, i)
    return out


def expmap_rows(const double[:, ::1] x, const double[:, ::1] v, double c):
    cdef Py_ssize_t n = x.shape[0], D = x.shape[1], i, k
    out = np.empty((n, D))
    cdef double[:, ::1] o = out
    cdef double sc = sqrt(c), nv, r, a, b
    with nogil:
        for i in range(n):
            nv = _mink(v, v, i)
            nv = sqrt(nv) if nv > 0.0 else 0.0
            if nv < _ZERO:
                for k in range(D):
                    o[i, k] = x[i, k]
                continue
            r = nv / sc
            a = cosh(r)
            b = sc * sinh(r) / nv
            for k in range(D):
                o[i, k] = a * x[i, k] + b * v[i, k]
    return out


def logmap_rows(const double[:, ::1] x, const double[:, ::1] y, double c):
    cdef Py_ssize_t n = x.shape[0], D = x.shape[1], i, k
    out = np.empty((n, D))
    cdef double[:, ::1] o = out
    cdef double sc = sqrt(c), a, alpha, dist, un, t, s
    with nogil:
        for i in range(n):
            a = _mink(x, y, i)
            alpha = -a / c
            if alpha < _FLOOR:
                alpha = _FLOOR
            for k in range(D):
                o[i, k] = y[i, k] + (a / c) * x[i, k]
            un = -o[i, 0] * o[i, 0]
            for k in range(1, D):
                un += o[i, k] * o[i, k]
            un = sqrt(un) if un > 0.0 else 0.0
            if alpha < _NEAR:
                dist = sc * asinh(un / sc)
            else:
                dist = sc * acosh(alpha)
            if dist < _ZERO or un <= 0.0:
                s = 0.0
            else:
                s = dist / un
            for k in range(D):
                o[i, k] = s * o[i, k]
    return out


def expmap0_rows(const double[:, ::1] t, double c):
    cdef Py_ssize_t n = t.shape[0], d = t.shape[1], i, k
    out = np.empty((n, d + 1))
    cdef double[:, ::1] o = out
    cdef double sc = sqrt(c), nv, r, b
    with nogil:
        for i in range(n):
            nv = 0.0
            for k in range(d):
                nv += t[i, k] * t[i, k]
            nv = sqrt(nv)
            if nv < _ZERO:
                o[i, 0] = sc
                for k in range(d):
                    o[i, k + 1] = 0.0
                continue
            r = nv / sc
            o[i, 0] = sc * cosh(r)
            b = sc * sinh(r) / nv
            for k in range(d):
                o[i, k + 1] = b * t[i, k]
    return out


def logmap0_rows(const double[:, ::1] x, double c):
    cdef Py_ssize_t n = x.shape[0], D = x.shape[1], i, k
    out = np.zeros((n, D))
    cdef double[:, ::1] o = out
    cdef double sc = sqrt(c), s, alpha, b
    with nogil:
        for i in range(n):
            s = 0.0
            for k in range(1, D):
                s += x[i, k] * x[i, k]
            s = sqrt(s)
            if s < _ZERO:
                continue
            alpha = x[i, 0] / sc
            if alpha < _FLOOR:
                alpha = _FLOOR
            b = sc * acosh(alpha) / s
            for k in range(1, D):
                o[i, k] = b * x[i, k]
    return out


def dist_rows(const double[:, ::1] x, const double[:, ::1] y, double c):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double sc = sqrt(c), alpha
    with nogil:
        for i in range(n):
            alpha = -_mink(x, y, i) / c
            if alpha < _FLOOR:
                alpha = _FLOOR
            o[i] = sc * acosh(alpha)
    return out


cdef inline void _put(cnp.int64_t[::1] skey, cnp.int64_t[::1] sval, Py_ssize_t* m,
                      cnp.int64_t key, cnp.int64_t val) noexcept nogil:
    cdef Py_ssize_t q
    for q in range(m[0]):
        if skey[q] == key:
            sval[q] = val
            return
    skey[m[0]] = key
    sval[m[0]] = val
    m[0] += 1


def sample_rows(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                const cnp.int64_t[::1] nodes, const double[:, ::1] u):
    cdef Py_ssize_t n = u.shape[0], size = u.shape[1], r, j, q, m
    picked = np.full((n, size), -1, dtype=np.int64)
    pos = np.full((n, size), -1, dtype=np.int64)
    empty = np.zeros(n, dtype=np.uint8)
    cdef cnp.int64_t[:, ::1] pk = picked
    cdef cnp.int64_t[:, ::1] ps = pos
    cdef unsigned char[::1] em = empty
    cdef cnp.int64_t start, deg, k, vj, vk
    # virtual permutation for partial Fisher-Yates; at most 2*size touched slots
    cdef cnp.int64_t[::1] skey = np.empty(2 * size + 2, dtype=np.int64)
    cdef cnp.int64_t[::1] sval = np.empty(2 * size + 2, dtype=np.int64)
    with nogil:
        for r in range(n):
            start = indptr[nodes[r]]
            deg = indptr[nodes[r] + 1] - start
            if deg == 0:
                em[r] = 1
                continue
            if deg < size:
                for j in range(size):
                    k = <cnp.int64_t>(u[r, j] * deg)
                    if k > deg - 1:
                        k = deg - 1
                    ps[r, j] = start + k
                    pk[r, j] = indices[start + k]
                continue
            m = 0
            for j in range(size):
                k = <cnp.int64_t>(u[r, j] * (deg - j))
                if k > deg - j - 1:
                    k = deg - j - 1
                k = k + j
                vj = j
                vk = k
                for q in range(m):
                    if skey[q] == j:
                        vj = sval[q]
                    if skey[q] == k:
                        vk = sval[q]
                _put(skey, sval, &m, k, vj)
                _put(skey, sval, &m, j, vk)
                ps[r, j] = start + vk
                pk[r, j] = indices[start + vk]
    return picked, pos, empty.view(bool)
