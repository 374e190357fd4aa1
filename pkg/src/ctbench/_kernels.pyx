# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: ray-driven projection, pixel-driven backprojection,
and anti-aliased disk coverage.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature; ``ctbench.kernels`` picks one at import time.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, floor, fabs

cnp.import_array()


cdef inline void _clip(double p0, double dp, double lo, double hi,
                       double* kmin, double* kmax) noexcept nogil:
    # Narrow [kmin, kmax] to the k with lo < p0 + k*dp < hi.
    cdef double a, b, tmp
    if fabs(dp) < 1e-15:
        if p0 <= lo or p0 >= hi:
            kmin[0] = 1.0
            kmax[0] = 0.0
        return
    a = (lo - p0) / dp
    b = (hi - p0) / dp
    if a > b:
        tmp = a
        a = b
        b = tmp
    if a > kmin[0]:
        kmin[0] = a
    if b < kmax[0]:
        kmax[0] = b


def project(double[:, ::1] mu, double spacing, double[::1] angles,
            double[::1] det_pos, double step):
    """Line integrals of ``mu`` along parallel rays (views x detectors)."""
    cdef Py_ssize_t h = mu.shape[0], w = mu.shape[1]
    cdef Py_ssize_t nv = angles.shape[0], nd = det_pos.shape[0]
    cdef double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0
    cdef double half = 0.5 * spacing * sqrt(<double>(h * h + w * w)) + spacing
    cdef Py_ssize_t ns = <Py_ssize_t>(2.0 * half / step) + 1
    cdef double s0 = -0.5 * (ns - 1) * step
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pad_arr = np.zeros((h + 2, w + 2))
    pad_arr[1:-1, 1:-1] = mu
    cdef double[:, ::1] pad = pad_arr
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.zeros((nv, nd))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t v, d, k, k0, k1, r0, c0
    cdef double c, s, t, row, col, drow, dcol, acc, fr, fc, kmin, kmax
    cdef double inv = 1.0 / spacing
    with nogil:
        for v in range(nv):
            c = cos(angles[v])
            s = sin(angles[v])
            # sample k sits at row = row_0 + k*drow, col = col_0 + k*dcol (padded frame)
            drow = c * step * inv
            dcol = -s * step * inv
            for d in range(nd):
                t = det_pos[d]
                row = (t * s + s0 * c) * inv + cy + 1.0
                col = (t * c - s0 * s) * inv + cx + 1.0
                kmin = 0.0
                kmax = ns - 1.0
                _clip(row, drow, 0.0, h + 1.0, &kmin, &kmax)
                _clip(col, dcol, 0.0, w + 1.0, &kmin, &kmax)
                if kmax < kmin:
                    continue
                k0 = <Py_ssize_t>floor(kmin) - 1
                k1 = <Py_ssize_t>floor(kmax) + 1
                if k0 < 0:
                    k0 = 0
                if k1 > ns - 1:
                    k1 = ns - 1
                acc = 0.0
                for k in range(k0, k1 + 1):
                    fr = row + k * drow
                    fc = col + k * dcol
                    if fr <= 0.0 or fc <= 0.0 or fr >= h + 1.0 or fc >= w + 1.0:
                        continue
                    r0 = <Py_ssize_t>fr
                    c0 = <Py_ssize_t>fc
                    fr = fr - r0
                    fc = fc - c0
                    acc += ((1.0 - fr) * ((1.0 - fc) * pad[r0, c0] + fc * pad[r0, c0 + 1])
                            + fr * ((1.0 - fc) * pad[r0 + 1, c0] + fc * pad[r0 + 1, c0 + 1]))
                out[v, d] = acc * step
    return out_arr


def backproject(double[:, ::1] q, double[::1] angles, double det0, double det_spacing,
                Py_ssize_t width, Py_ssize_t height, double spacing):
    """Unweighted sum over views of linearly interpolated detector values."""
    cdef Py_ssize_t nv = q.shape[0], nd = q.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.zeros((height, width))
    cdef double[:, ::1] out = out_arr
    cdef double cy = (height - 1) / 2.0, cx = (width - 1) / 2.0
    cdef Py_ssize_t v, i, j, k
    cdef double c, s, x, y, u, f, base
    with nogil:
        for v in range(nv):
            c = cos(angles[v]) * spacing / det_spacing
            s = sin(angles[v]) * spacing / det_spacing
            for i in range(height):
                y = i - cy
                base = y * s - det0 / det_spacing - cx * c
                for j in range(width):
                    u = base + j * c
                    if u < 0.0 or u > nd - 1:
                        continue
                    k = <Py_ssize_t>u
                    if k >= nd - 1:
                        out[i, j] += q[v, nd - 1]
                        continue
                    f = u - k
                    out[i, j] += (1.0 - f) * q[v, k] + f * q[v, k + 1]
    return out_arr


cdef inline double _halfplane_cover(double dist, double nx, double ny, double h) noexcept nogil:
    # Fraction of an h x h square lying on the inner side of a line at signed
    # distance ``dist`` (positive = square centre inside) with unit normal (nx, ny).
    cdef double a = fabs(nx) * h, b = fabs(ny) * h, tmp, t
    if a < b:
        tmp = a
        a = b
        b = tmp
    t = dist + 0.5 * (a + b)
    if t <= 0.0:
        return 0.0
    if t >= a + b:
        return 1.0
    if b < 1e-12 * h:
        return t / a
    if t <= b:
        return t * t / (2.0 * a * b)
    if t <= a:
        return (t - 0.5 * b) / a
    return 1.0 - (a + b - t) * (a + b - t) / (2.0 * a * b)


def disk_coverage(Py_ssize_t width, Py_ssize_t height, double spacing,
                  double cx_mm, double cy_mm, double radius_mm, Py_ssize_t supersample):
    """Per-pixel area fraction of a disk; each subsample uses a local half-plane."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.zeros((height, width))
    cdef double[:, ::1] out = out_arr
    cdef double cyp = (height - 1) / 2.0, cxp = (width - 1) / 2.0
    cdef double hs = spacing / supersample
    cdef double reach = radius_mm + spacing
    cdef double inv_n = 1.0 / (supersample * supersample)
    cdef Py_ssize_t i, j, a, b
    cdef Py_ssize_t i0, i1, j0, j1
    cdef double px, py, sx, sy, dx, dy, r, acc
    i0 = max(<Py_ssize_t>floor((cy_mm - reach) / spacing + cyp), 0)
    i1 = min(<Py_ssize_t>floor((cy_mm + reach) / spacing + cyp) + 2, height)
    j0 = max(<Py_ssize_t>floor((cx_mm - reach) / spacing + cxp), 0)
    j1 = min(<Py_ssize_t>floor((cx_mm + reach) / spacing + cxp) + 2, width)
    with nogil:
        for i in range(i0, i1):
            py = (i - cyp) * spacing
            for j in range(j0, j1):
                px = (j - cxp) * spacing
                dx = px - cx_mm
                dy = py - cy_mm
                r = sqrt(dx * dx + dy * dy)
                if r + 0.7072 * spacing <= radius_mm:
                    out[i, j] = 1.0
                    continue
                if r - 0.7072 * spacing >= radius_mm:
                    continue
                acc = 0.0
                for a in range(supersample):
                    sy = py + (a + 0.5) * hs - 0.5 * spacing
                    for b in range(supersample):
                        sx = px + (b + 0.5) * hs - 0.5 * spacing
                        dx = sx - cx_mm
                        dy = sy - cy_mm
                        r = sqrt(dx * dx + dy * dy)
                        if r < 1e-12:
                            acc += 1.0
                        else:
                            acc += _halfplane_cover(radius_mm - r, dx / r, dy / r, hs)
                out[i, j] = acc * inv_n
    return out_arr
