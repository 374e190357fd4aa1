"""Global fidelity metrics: RMSE, PSNR, SSIM and MS-SSIM.

The SSIM pieces work on plain arrays and expose the intermediate maps so the
MS-SSIM training loss can reuse them for its backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import DataError, Image

DEFAULT_DATA_RANGE = 2000.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = DEFAULT_DATA_RANGE

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise DataError(f"SSIM window must be odd and >= 3, got {self.window_size}")
        if not (self.k1 > 0 and self.k2 > 0 and self.data_range > 0 and self.window_sigma > 0):
            raise DataError("SSIM constants, sigma and data range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = a.as_float64() if isinstance(a, Image) else np.asarray(a, dtype=np.float64)
    y = b.as_float64() if isinstance(b, Image) else np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def rmse(a, b) -> float:
    x, y = _pair(a, b)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def psnr(a, b, data_range: float = DEFAULT_DATA_RANGE) -> float:
    """Peak SNR in dB; identical inputs give ``inf``."""
    err = rmse(a, b)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(data_range / err)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2.0 * sigma ** 2))
    return g / g.sum()


def filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation with ``g`` over the last two axes, 'valid' region only."""
    r = len(g) // 2
    out = correlate1d(img, g, axis=-1, mode="constant")
    out = correlate1d(out, g, axis=-2, mode="constant")
    return out[..., r:img.shape[-2] - r, r:img.shape[-1] - r]


def filter_valid_adjoint(grad: np.ndarray, g: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`filter_valid`: scatter a valid-region map back to full size."""
    r = len(g) // 2
    full = np.zeros(grad.shape[:-2] + tuple(shape[-2:]))
    full[..., r:shape[-2] - r, r:shape[-1] - r] = grad
    out = correlate1d(full, g[::-1], axis=-1, mode="constant")
    return correlate1d(out, g[::-1], axis=-2, mode="constant")


@dataclass
class SsimMaps:
    """Local statistics of one SSIM evaluation, kept for the backward pass."""

    x: np.ndarray
    y: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    a1: np.ndarray
    b1: np.ndarray
    a2: np.ndarray
    b2: np.ndarray

    @property
    def luminance(self):
        return self.a1 / self.b1

    @property
    def cs(self):
        return self.a2 / self.b2

    @property
    def ssim(self):
        return (self.a1 * self.a2) / (self.b1 * self.b2)


def ssim_maps(x: np.ndarray, y: np.ndarray, cfg: SsimConfig) -> SsimMaps:
    g = gaussian_window(cfg.window_size, cfg.window_sigma)
    if min(x.shape[-2:]) < cfg.window_size:
        raise DataError(f"image {x.shape[-2:]} smaller than the {cfg.window_size}px SSIM window")
    mu_x = filter_valid(x, g)
    mu_y = filter_valid(y, g)
    sxx = filter_valid(x * x, g) - mu_x * mu_x
    syy = filter_valid(y * y, g) - mu_y * mu_y
    sxy = filter_valid(x * y, g) - mu_x * mu_y
    return SsimMaps(x, y, mu_x, mu_y,
                    a1=2.0 * mu_x * mu_y + cfg.c1, b1=mu_x * mu_x + mu_y * mu_y + cfg.c1,
                    a2=2.0 * sxy + cfg.c2, b2=sxx + syy + cfg.c2)


def ssim_maps_backward(m: SsimMaps, g_lum: np.ndarray | None, g_cs: np.ndarray | None,
                       cfg: SsimConfig) -> np.ndarray:
    """Gradient w.r.t. ``x`` given upstream gradients on the luminance and cs maps."""
    g = gaussian_window(cfg.window_size, cfg.window_sigma)
    d_mu = np.zeros_like(m.mu_x)
    d_sxx = np.zeros_like(m.mu_x)
    d_sxy = np.zeros_like(m.mu_x)
    if g_lum is not None:
        d_mu += g_lum * (2.0 * m.mu_y / m.b1 - m.a1 * 2.0 * m.mu_x / m.b1 ** 2)
    if g_cs is not None:
        d_cov = g_cs * 2.0 / m.b2
        d_var = -g_cs * m.a2 / m.b2 ** 2
        # cov = E[xy] - mu_x mu_y ; var = E[x^2] - mu_x^2
        d_sxy += d_cov
        d_sxx += d_var
        d_mu += -d_cov * m.mu_y - 2.0 * d_var * m.mu_x
    shape = m.x.shape
    return (filter_valid_adjoint(d_mu, g, shape)
            + 2.0 * m.x * filter_valid_adjoint(d_sxx, g, shape)
            + m.y * filter_valid_adjoint(d_sxy, g, shape))


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    x, y = _pair(a, b)
    return float(np.mean(ssim_maps(x, y, cfg).ssim))


def downsample2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def downsample2_adjoint(grad: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(grad.shape[:-2] + tuple(shape[-2:]))
    h, w = grad.shape[-2] * 2, grad.shape[-1] * 2
    q = 0.25 * grad
    for dy in (0, 1):
        for dx in (0, 1):
            out[..., dy:h:2, dx:w:2] = q
    return out


def ms_ssim_weights(n_scales: int) -> tuple[float, ...]:
    """Standard five-scale exponents; fewer scales use the renormalised leading ones."""
    if n_scales == len(MS_SSIM_WEIGHTS):
        return MS_SSIM_WEIGHTS
    if n_scales == 1:
        return (1.0,)
    w = np.asarray(MS_SSIM_WEIGHTS[:n_scales])
    return tuple(float(v) for v in w / w.sum())


def max_scales(shape, window_size: int) -> int:
    n = 0
    h, w = shape[-2:]
    while min(h, w) >= window_size:
        n += 1
        h, w = h // 2, w // 2
    return n


def ms_ssim_value_and_grad(x: np.ndarray, y: np.ndarray, cfg: SsimConfig, n_scales: int,
                           weights=None, want_grad: bool = True):
    """MS-SSIM of one image pair and its gradient w.r.t. ``x``.

    Per-scale means are clamped at zero before exponentiation.
    """
    weights = tuple(weights) if weights is not None else ms_ssim_weights(n_scales)
    if len(weights) != n_scales:
        raise DataError("need one exponent per scale")
    if max_scales(x.shape, cfg.window_size) < n_scales:
        raise DataError(
            f"image {x.shape[-2:]} too small for {n_scales} scales with a "
            f"{cfg.window_size}px window")
    maps, shapes, terms = [], [], []
    xs, ys = x, y
    for j in range(n_scales):
        if j:
            xs, ys = downsample2(xs), downsample2(ys)
        m = ssim_maps(xs, ys, cfg)
        maps.append(m)
        shapes.append(xs.shape)
        terms.append(float(np.mean(m.ssim if j == n_scales - 1 else m.cs)))
    clamped = [max(t, 0.0) for t in terms]
    value = float(np.prod([c ** w for c, w in zip(clamped, weights)]))
    if not want_grad:
        return value, None
    grad = np.zeros(shapes[-1])
    for j in reversed(range(n_scales)):
        m = maps[j]
        if clamped[j] > 0.0:
            others = np.prod([c ** w for i, (c, w) in enumerate(zip(clamped, weights)) if i != j])
            d_term = others * weights[j] * clamped[j] ** (weights[j] - 1.0)
        else:
            d_term = 0.0
        n = m.mu_x.size
        if j == n_scales - 1:
            up = d_term / n
            g_lum = up * m.cs
            g_cs = up * m.luminance
            grad = ssim_maps_backward(m, g_lum, g_cs, cfg)
        else:
            grad = downsample2_adjoint(grad, shapes[j])
            if d_term:
                grad = grad + ssim_maps_backward(m, None, np.full(m.mu_x.shape, d_term / n), cfg)
    return value, grad


def ms_ssim(a, b, cfg: SsimConfig = SsimConfig(), n_scales: int = 5, weights=None) -> float:
    x, y = _pair(a, b)
    return ms_ssim_value_and_grad(x, y, cfg, n_scales, weights, want_grad=False)[0]


def all_metrics(a, b, data_range: float = DEFAULT_DATA_RANGE, n_scales: int = 5) -> dict:
    cfg = SsimConfig(data_range=data_range)
    x, _ = _pair(a, b)
    scales = min(n_scales, max_scales(x.shape, cfg.window_size))
    return {"rmse": rmse(a, b), "psnr": psnr(a, b, data_range), "ssim": ssim(a, b, cfg),
            "ms_ssim": ms_ssim(a, b, cfg, scales), "data_range": data_range, "ms_ssim_scales": scales}
