# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Cython implementations of the hot kernels (distance field, farthest-point sampling)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def distance_field(points, center):
    pts = np.ascontiguousarray(points)
    if pts.dtype == np.float32:
        return _distance_field_f32(pts, np.asarray(center, dtype=np.float32).reshape(3))
    return _distance_field_f64(
        np.ascontiguousarray(pts, dtype=np.float64),
        np.asarray(center, dtype=np.float64).reshape(3),
    )


def _distance_field_f64(cnp.float64_t[:, ::1] pts, cnp.float64_t[::1] c):
    cdef Py_ssize_t n = pts.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef cnp.float64_t[::1] o = out
    cdef Py_ssize_t i
    cdef double dx, dy, dz
    for i in range(n):
        dx = pts[i, 0] - c[0]
        dy = pts[i, 1] - c[1]
        dz = pts[i, 2] - c[2]
        o[i] = sqrt(dx * dx + dy * dy + dz * dz)
    return out


def _distance_field_f32(cnp.float32_t[:, ::1] pts, cnp.float32_t[::1] c):
    cdef Py_ssize_t n = pts.shape[0]
    out = np.empty(n, dtype=np.float32)
    cdef cnp.float32_t[::1] o = out
    cdef Py_ssize_t i
    cdef float dx, dy, dz
    for i in range(n):
        dx = pts[i, 0] - c[0]
        dy = pts[i, 1] - c[1]
        dz = pts[i, 2] - c[2]
        o[i] = <float>sqrt(dx * dx + dy * dy + dz * dz)
    return out


def farthest_point_indices(points, Py_ssize_t n, Py_ssize_t start_index=0):
    cdef cnp.float64_t[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t num = pts.shape[0]
    if n < 1 or n > num:
        raise ValueError(f"cannot sample {n} of {num} points")
    chosen = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] ch = chosen
    dist = np.empty(num, dtype=np.float64)
    cdef cnp.float64_t[::1] d = dist
    cdef Py_ssize_t i, j, best
    cdef double dx, dy, dz, dd, bestval
    ch[0] = start_index
    for j in range(num):
        dx = pts[j, 0] - pts[start_index, 0]
        dy = pts[j, 1] - pts[start_index, 1]
        dz = pts[j, 2] - pts[start_index, 2]
        d[j] = dx * dx + dy * dy + dz * dz
    for i in range(1, n):
        best = 0
        bestval = -1.0
        for j in range(num):
            if d[j] > bestval:
                bestval = d[j]
                best = j
        ch[i] = best
        for j in range(num):
            dx = pts[j, 0] - pts[best, 0]
            dy = pts[j, 1] - pts[best, 1]
            dz = pts[j, 2] - pts[best, 2]
            dd = dx * dx + dy * dy + dz * dz
            if dd < d[j]:
                d[j] = dd
    return chosen
