"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and conventions match the compiled module exactly; results agree
to floating-point reassociation error.
"""

import numpy as np


def _bilinear(padded, row, col):
    h, w = padded.shape[0] - 2, padded.shape[1] - 2
    inside = (row > -1.0) & (col > -1.0) & (row < h) & (col < w)
    row = np.where(inside, row, -0.5) + 1.0
    col = np.where(inside, col, -0.5) + 1.0
    r0 = np.floor(row).astype(np.intp)
    c0 = np.floor(col).astype(np.intp)
    fr = row - r0
    fc = col - c0
    val = ((1.0 - fr) * ((1.0 - fc) * padded[r0, c0] + fc * padded[r0, c0 + 1])
           + fr * ((1.0 - fc) * padded[r0 + 1, c0] + fc * padded[r0 + 1, c0 + 1]))
    return np.where(inside, val, 0.0)


def project(mu, spacing, angles, det_pos, step):
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    h, w = mu.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    half = 0.5 * spacing * np.sqrt(float(h * h + w * w)) + spacing
    ns = int(2.0 * half / step) + 1
    sv = -0.5 * (ns - 1) * step + np.arange(ns) * step
    det_pos = np.asarray(det_pos, dtype=np.float64)
    padded = np.pad(mu, 1)
    out = np.zeros((len(angles), len(det_pos)))
    for v, theta in enumerate(angles):
        c, s = np.cos(theta), np.sin(theta)
        x = det_pos[:, None] * c - sv[None, :] * s
        y = det_pos[:, None] * s + sv[None, :] * c
        out[v] = _bilinear(padded, y / spacing + cy, x / spacing + cx).sum(axis=1) * step
    return out


def backproject(q, angles, det0, det_spacing, width, height, spacing):
    q = np.ascontiguousarray(q, dtype=np.float64)
    nd = q.shape[1]
    yy = (np.arange(height) - (height - 1) / 2.0)[:, None]
    xx = (np.arange(width) - (width - 1) / 2.0)[None, :]
    out = np.zeros((height, width))
    for v, theta in enumerate(angles):
        c = np.cos(theta) * spacing / det_spacing
        s = np.sin(theta) * spacing / det_spacing
        u = xx * c + yy * s - det0 / det_spacing
        valid = (u >= 0.0) & (u <= nd - 1)
        uc = np.clip(u, 0.0, nd - 1)
        k = np.minimum(uc.astype(np.intp), nd - 2)
        f = uc - k
        row = q[v]
        out += np.where(valid, (1.0 - f) * row[k] + f * row[k + 1], 0.0)
    return out


def _halfplane_cover(dist, nx, ny, h):
    a = np.abs(nx) * h
    b = np.abs(ny) * h
    a, b = np.maximum(a, b), np.minimum(a, b)
    t = dist + 0.5 * (a + b)
    with np.errstate(divide="ignore", invalid="ignore"):
        degenerate = b < 1e-12 * h
        lo = np.where(degenerate, t / a, t * t / (2.0 * a * b))
        mid = (t - 0.5 * b) / a
        hi = np.where(degenerate, t / a, 1.0 - (a + b - t) ** 2 / (2.0 * a * b))
    out = np.where(t <= b, lo, np.where(t <= a, mid, hi))
    out = np.where(t <= 0.0, 0.0, out)
    return np.where(t >= a + b, 1.0, out)


def disk_coverage(width, height, spacing, cx_mm, cy_mm, radius_mm, supersample):
    out = np.zeros((height, width))
    cyp, cxp = (height - 1) / 2.0, (width - 1) / 2.0
    py = ((np.arange(height) - cyp) * spacing)[:, None]
    px = ((np.arange(width) - cxp) * spacing)[None, :]
    r = np.hypot(px - cx_mm, py - cy_mm)
    out[r + 0.7072 * spacing <= radius_mm] = 1.0
    rows, cols = np.nonzero(np.abs(r - radius_mm) < 0.7072 * spacing)
    if rows.size == 0:
        return out
    hs = spacing / supersample
    offs = (np.arange(supersample) + 0.5) * hs - 0.5 * spacing
    sy = py[rows, 0][:, None, None] + offs[None, :, None]
    sx = px[0, cols][:, None, None] + offs[None, None, :]
    dx = sx - cx_mm
    dy = sy - cy_mm
    rr = np.hypot(dx, dy)
    safe = np.where(rr < 1e-12, 1.0, rr)
    cov = _halfplane_cover(radius_mm - rr, dx / safe, dy / safe, hs)
    cov = np.where(rr < 1e-12, 1.0, cov)
    out[rows, cols] = cov.sum(axis=(1, 2)) / (supersample * supersample)
    return out
