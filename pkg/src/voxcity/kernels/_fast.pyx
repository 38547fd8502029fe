# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels; semantics and per-element accumulation order match _ref.

Accumulation runs corner-major (c outer, query inner) in both backends so
float64 results are bit-identical to the reference implementation.
"""

from libc.math cimport floor

import numpy as np

BACKEND_NAME = "fast"


def bin_points(positions, origin, double voxel_size):
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    org = np.ascontiguousarray(origin, dtype=np.float64)
    out = np.empty((pos.shape[0], 3), dtype=np.int64)
    _bin_points(pos, org, voxel_size, out)
    return out


cdef void _bin_points(double[:, ::1] pos, double[::1] org, double v,
                      long long[:, ::1] out) nogil:
    cdef Py_ssize_t n = pos.shape[0], i, ax
    for i in range(n):
        for ax in range(3):
            out[i, ax] = <long long>floor((pos[i, ax] - org[ax]) / v)


def fractional_coords(positions, origin, double voxel_size):
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    org = np.ascontiguousarray(origin, dtype=np.float64)
    cells = np.empty((pos.shape[0], 3), dtype=np.int64)
    frac = np.empty((pos.shape[0], 3), dtype=np.float64)
    _fractional_coords(pos, org, voxel_size, cells, frac)
    return cells, frac


cdef void _fractional_coords(double[:, ::1] pos, double[::1] org, double v,
                             long long[:, ::1] cells, double[:, ::1] frac) nogil:
    cdef Py_ssize_t n = pos.shape[0], i, ax
    cdef double rel, f
    for i in range(n):
        for ax in range(3):
            rel = (pos[i, ax] - org[ax]) / v
            cells[i, ax] = <long long>floor(rel)
            f = rel - cells[i, ax]
            if f < 0.0:
                f = 0.0
            elif f > 1.0:
                f = 1.0
            frac[i, ax] = f


def corner_weights(frac):
    f = np.ascontiguousarray(frac, dtype=np.float64)
    out = np.empty((f.shape[0], 8), dtype=np.float64)
    _corner_weights(f, out)
    return out


cdef void _corner_weights(double[:, ::1] frac, double[:, ::1] out) nogil:
    cdef Py_ssize_t n = frac.shape[0], i, c, ax
    cdef double w, t
    for i in range(n):
        for c in range(8):
            w = 1.0
            for ax in range(3):
                t = frac[i, ax]
                if (c >> (2 - ax)) & 1:
                    w = w * t
                else:
                    w = w * (1.0 - t)
            out[i, c] = w


def sample_gather(corner_rows, weights, attrs):
    rows = np.ascontiguousarray(corner_rows, dtype=np.int64)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    a = np.ascontiguousarray(attrs, dtype=np.float64)
    out = np.zeros((rows.shape[0], a.shape[1]), dtype=np.float64)
    _sample_gather(rows, w, a, out)
    return out


cdef void _sample_gather(long long[:, ::1] rows, double[:, ::1] w,
                         double[:, ::1] attrs, double[:, ::1] out) nogil:
    cdef Py_ssize_t q = rows.shape[0], cdim = attrs.shape[1], i, c, k
    cdef Py_ssize_t stencil = rows.shape[1]
    cdef long long r
    for c in range(stencil):
        for i in range(q):
            r = rows[i, c]
            if r < 0:
                continue
            for k in range(cdim):
                out[i, k] += w[i, c] * attrs[r, k]


def splat_scatter(corner_rows, weights, values, Py_ssize_t n_vertices):
    rows = np.ascontiguousarray(corner_rows, dtype=np.int64)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    vals = np.ascontiguousarray(values, dtype=np.float64)
    accum = np.zeros((n_vertices, vals.shape[1]), dtype=np.float64)
    wsum = np.zeros(n_vertices, dtype=np.float64)
    _splat_scatter(rows, w, vals, accum, wsum)
    return accum, wsum


cdef void _splat_scatter(long long[:, ::1] rows, double[:, ::1] w,
                         double[:, ::1] vals, double[:, ::1] accum,
                         double[::1] wsum) nogil:
    cdef Py_ssize_t q = rows.shape[0], cdim = vals.shape[1], i, c, k
    cdef Py_ssize_t stencil = rows.shape[1]
    cdef long long r
    for c in range(stencil):
        for i in range(q):
            r = rows[i, c]
            if r < 0:
                continue
            for k in range(cdim):
                accum[r, k] += w[i, c] * vals[i, k]
            wsum[r] += w[i, c]
