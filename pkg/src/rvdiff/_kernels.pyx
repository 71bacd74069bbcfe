# cython: language_level=3
"""Compiled inner loops. Semantics must match ``rvdiff._fallback`` exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()


def scatter_nearest(const cnp.int64_t[::1] pix, const double[::1] depth, Py_ssize_t npix):
    """Index of the nearest point landing in each pixel, -1 where none does.

    Ties on depth go to the lower point index.
    """
    cdef Py_ssize_t n = pix.shape[0]
    cdef Py_ssize_t i, p
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.full(npix, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] win = out
    cdef cnp.ndarray[double, ndim=1] best_arr = np.full(npix, INFINITY, dtype=np.float64)
    cdef double[::1] best = best_arr
    for i in range(n):
        p = pix[i]
        if depth[i] < best[p] or (depth[i] == best[p] and (win[p] < 0 or i < win[p])):
            best[p] = depth[i]
            win[p] = i
    return out


cdef inline Py_ssize_t _bin_index(double v, double lo, double width, Py_ssize_t bins):
    # floor estimate, then corrected against the edges lo + i * width so that
    # rounding in (v - lo) can never move a point across an edge
    cdef Py_ssize_t i = <Py_ssize_t>floor((v - lo) / width)
    if i >= bins:
        i = bins - 1
    if i < 0:
        i = 0
    if v < lo + i * width:
        i -= 1
    elif i + 1 < bins and v >= lo + (i + 1) * width:
        i += 1
    return i


def bev_counts(const double[::1] x, const double[::1] y, const cnp.int64_t[::1] labels,
               double x_min, double x_max, double y_min, double y_max,
               Py_ssize_t bins, Py_ssize_t num_classes):
    """Per-class 2D occupancy counts over the half-open box [min, max)."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t k, i, j, c
    cdef double wx = (x_max - x_min) / bins
    cdef double wy = (y_max - y_min) / bins
    cdef cnp.ndarray[cnp.int64_t, ndim=3] out = np.zeros((num_classes, bins, bins), dtype=np.int64)
    cdef cnp.int64_t[:, :, ::1] h = out
    for k in range(n):
        if not (x[k] >= x_min and x[k] < x_max and y[k] >= y_min and y[k] < y_max):
            continue
        c = labels[k]
        if c < 0 or c >= num_classes:
            continue
        i = _bin_index(x[k], x_min, wx, bins)
        j = _bin_index(y[k], y_min, wy, bins)
        h[c, i, j] += 1
    return out


def poly3_kernel_sum(const double[:, ::1] a, const double[:, ::1] b, double scale):
    """Sum over all pairs of (scale * <a_i, b_j> + 1)**3.

    Row-major order with a serial inner sum per row, so the result does not
    depend on any threading.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    cdef Py_ssize_t d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double dot, v, row, total = 0.0
    for i in range(n):
        row = 0.0
        for j in range(m):
            dot = 0.0
            for k in range(d):
                dot += a[i, k] * b[j, k]
            v = scale * dot + 1.0
            row += v * v * v
        total += row
    return total


def raycast(const double[:, ::1] dirs, double ground_z,
            const double[:, ::1] lo, const double[:, ::1] hi, double max_range):
    """First hit distance along unit rays from the origin.

    Returns ``(dist, surface)`` where surface is -1 for a miss, 0 for the
    ground plane ``z = ground_z`` and ``k + 1`` for box ``k``.
    """
    cdef Py_ssize_t nr = dirs.shape[0]
    cdef Py_ssize_t nb = lo.shape[0]
    cdef Py_ssize_t r, b, ax
    cdef double best, t0, t1, ta, tb, tmp, dz, tg, dcomp
    cdef int surf
    cdef cnp.ndarray[double, ndim=1] dist_arr = np.full(nr, INFINITY, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] surf_arr = np.full(nr, -1, dtype=np.int64)
    cdef double[::1] dist = dist_arr
    cdef cnp.int64_t[::1] surface = surf_arr
    for r in range(nr):
        best = INFINITY
        surf = -1
        dz = dirs[r, 2]
        if dz < 0.0:
            tg = ground_z / dz
            if tg > 0.0:
                best = tg
                surf = 0
        for b in range(nb):
            t0 = -INFINITY
            t1 = INFINITY
            for ax in range(3):
                dcomp = dirs[r, ax]
                if dcomp == 0.0:
                    if lo[b, ax] > 0.0 or hi[b, ax] < 0.0:
                        t0 = INFINITY
                        break
                    continue
                ta = lo[b, ax] / dcomp
                tb = hi[b, ax] / dcomp
                if ta > tb:
                    tmp = ta
                    ta = tb
                    tb = tmp
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
            if t0 <= t1 and t0 > 0.0 and t0 < best:
                best = t0
                surf = b + 1
        if surf >= 0 and best <= max_range:
            dist[r] = best
            surface[r] = surf
    return dist_arr, surf_arr
