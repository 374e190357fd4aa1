"""Minimal line-plot and image rasterizer on top of Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PilImage
from PIL import ImageDraw

from .core import save_png

PALETTE = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (255, 127, 14), (148, 103, 189), (23, 190, 207),
           (140, 86, 75), (127, 127, 127)]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return [float(v) for v in np.arange(start, hi + 0.5 * step, step)]


def line_plot(series: dict, path, title: str = "", xlabel: str = "", ylabel: str = "",
              size=(640, 420), logy: bool = False) -> Path:
    """Render ``{label: (x, y)}`` as coloured polylines with axes and a legend."""
    w, h = size
    left, right, top, bottom = 70, 20, 30, 45
    img = PilImage.new("RGB", size, "white")
    d = ImageDraw.Draw(img)
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()]) if series else np.zeros(1)
    if logy:
        ys = np.log10(np.maximum(ys, 1e-12))
    finite = np.isfinite(ys)
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    y0, y1 = (float(np.min(ys[finite])), float(np.max(ys[finite]))) if finite.any() else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def to_px(x, y):
        px = left + (np.asarray(x) - x0) / (x1 - x0) * (w - left - right)
        py = h - bottom - (np.asarray(y) - y0) / (y1 - y0) * (h - top - bottom)
        return px, py

    d.rectangle([left, top, w - right, h - bottom], outline="black")
    for t in _ticks(x0, x1):
        px, _ = to_px(t, y0)
        d.line([px, h - bottom, px, h - bottom + 4], fill="black")
        d.text((px - 12, h - bottom + 6), f"{t:g}", fill="black")
    for t in _ticks(y0, y1):
        _, py = to_px(x0, t)
        d.line([left - 4, py, left, py], fill="black")
        d.text((4, py - 6), f"{10 ** t:.2g}" if logy else f"{t:.3g}", fill="black")
    for i, (label, (x, y)) in enumerate(series.items()):
        y = np.asarray(y, float)
        if logy:
            y = np.log10(np.maximum(y, 1e-12))
        px, py = to_px(np.asarray(x, float), y)
        pts = [(float(a), float(b)) for a, b in zip(px, py) if np.isfinite(b)]
        color = PALETTE[i % len(PALETTE)]
        if len(pts) > 1:
            d.line(pts, fill=color, width=2)
        d.line([w - right - 150, top + 10 + 14 * i, w - right - 130, top + 10 + 14 * i], fill=color, width=2)
        d.text((w - right - 125, top + 4 + 14 * i), str(label), fill="black")
    d.text((left, 8), title, fill="black")
    d.text(((w - len(xlabel) * 6) // 2, h - 16), xlabel, fill="black")
    d.text((4, top - 14), ylabel, fill="black")
    path = Path(path)
    img.save(path)
    return path


def log_image_png(values: np.ndarray, path) -> Path:
    """Log-scaled grayscale rendering (e.g. a 2D NPS)."""
    v = np.log10(np.maximum(np.asarray(values, float), 1e-12))
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    return save_png(np.floor(scaled * 255 + 0.5).astype(np.uint8), path)
