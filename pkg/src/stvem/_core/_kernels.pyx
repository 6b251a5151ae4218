# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled monomial evaluation kernels."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _power_table(const double[:, ::1] pts, Py_ssize_t maxdeg, double[:, :, ::1] pw) noexcept nogil:
    cdef Py_ssize_t i, v, k
    cdef Py_ssize_t n = pts.shape[0], nv = pts.shape[1]
    for i in range(n):
        for v in range(nv):
            pw[i, v, 0] = 1.0
            for k in range(1, maxdeg + 1):
                pw[i, v, k] = pw[i, v, k - 1] * pts[i, v]


def vandermonde(const double[:, ::1] pts, const long[:, ::1] exps):
    cdef Py_ssize_t n = pts.shape[0], nv = pts.shape[1], nb = exps.shape[0]
    cdef Py_ssize_t i, j, v
    cdef long maxdeg = 0
    for j in range(nb):
        for v in range(nv):
            if exps[j, v] > maxdeg:
                maxdeg = exps[j, v]
    cdef double[:, :, ::1] pw = np.empty((n, nv, maxdeg + 1))
    out_arr = np.empty((n, nb))
    cdef double[:, ::1] out = out_arr
    cdef double acc
    with nogil:
        _power_table(pts, maxdeg, pw)
        for i in range(n):
            for j in range(nb):
                acc = 1.0
                for v in range(nv):
                    acc = acc * pw[i, v, exps[j, v]]
                out[i, j] = acc
    return out_arr


def vandermonde_deriv(const double[:, ::1] pts, const long[:, ::1] exps, Py_ssize_t var):
    cdef Py_ssize_t n = pts.shape[0], nv = pts.shape[1], nb = exps.shape[0]
    cdef Py_ssize_t i, j, v
    cdef long maxdeg = 0, e
    for j in range(nb):
        for v in range(nv):
            if exps[j, v] > maxdeg:
                maxdeg = exps[j, v]
    cdef double[:, :, ::1] pw = np.empty((n, nv, maxdeg + 1))
    out_arr = np.zeros((n, nb))
    cdef double[:, ::1] out = out_arr
    cdef double acc
    with nogil:
        _power_table(pts, maxdeg, pw)
        for j in range(nb):
            e = exps[j, var]
            if e == 0:
                continue
            for i in range(n):
                acc = <double>e * pw[i, var, e - 1]
                for v in range(nv):
                    if v != var:
                        acc = acc * pw[i, v, exps[j, v]]
                out[i, j] = acc
    return out_arr
