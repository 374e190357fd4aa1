"""Training losses with analytic gradients.

Every pixel term is averaged over the batch and over pixels, so values are
comparable across patch sizes. Priors follow the same convention: the L1 and
TV priors are (lambda/2) times a per-pixel mean; weight decay is
(beta/2) * ||theta||^2 and only touches the weight gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import DataError
from ..metrics import SsimConfig, max_scales, ms_ssim_value_and_grad

LOSS_KINDS = ("mse", "mse_l1prior", "mae", "mse_tvprior", "mse_wd", "msssim_l1")
LOSS_ALIASES = {"msel1": "mse_l1prior", "msetv": "mse_tvprior", "msewd": "mse_wd",
                "msssiml1": "msssim_l1", "ms-ssim+l1": "msssim_l1"}
TV_EPS = 1e-8


def canonical_kind(kind: str) -> str:
    k = kind.lower()
    k = LOSS_ALIASES.get(k, k)
    if k not in LOSS_KINDS:
        raise DataError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return k


@dataclass(frozen=True)
class LossConfig:
    kind: str = "mse"
    lam: float = 1e-7
    beta: float = 1e-4
    alpha: float = 0.84
    data_range: float = 1.0
    ssim_window: int = 5
    ssim_sigma: float = 1.5
    max_scales: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if self.lam < 0 or self.beta < 0:
            raise DataError(f"lambda and beta must be non-negative, got {self.lam}, {self.beta}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.data_range > 0:
            raise DataError("data range must be positive")

    @property
    def ssim(self) -> SsimConfig:
        return SsimConfig(window_size=self.ssim_window, window_sigma=self.ssim_sigma,
                          data_range=self.data_range)


def _tv_and_grad(p: np.ndarray):
    """Sum of eps-smoothed isotropic forward-difference magnitudes and its gradient."""
    gx = np.zeros_like(p)
    gy = np.zeros_like(p)
    gx[..., :, :-1] = p[..., :, 1:] - p[..., :, :-1]
    gy[..., :-1, :] = p[..., 1:, :] - p[..., :-1, :]
    mag = np.sqrt(gx * gx + gy * gy + TV_EPS)
    nx, ny = gx / mag, gy / mag
    g = np.zeros_like(p)
    g[..., :, :-1] -= nx[..., :, :-1]
    g[..., :, 1:] += nx[..., :, :-1]
    g[..., :-1, :] -= ny[..., :-1, :]
    g[..., 1:, :] += ny[..., :-1, :]
    return float(mag.sum()), g


def loss_and_grad(cfg: LossConfig, pred, target, weights=None):
    """Return (value, d value / d pred, d value / d weights or None).

    ``pred`` and ``target`` are (N, H, W) or (H, W) model-domain arrays. The
    computation is done in float64; the pred gradient comes back in the dtype
    of ``pred``.
    """
    pred = np.asarray(pred)
    out_dtype = pred.dtype if np.issubdtype(pred.dtype, np.floating) else np.float64
    p = pred.astype(np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"pred/target shape mismatch: {p.shape} vs {t.shape}")
    if p.ndim == 2:
        p, t = p[None], t[None]
    n_total = p.size
    r = p - t
    kind = cfg.kind
    g_w = None
    if kind == "mae":
        value = float(np.abs(r).sum()) / n_total
        grad = np.sign(r) / n_total
    elif kind == "msssim_l1":
        scfg = cfg.ssim
        scales = min(cfg.max_scales, max_scales(p.shape, scfg.window_size))
        if scales < 1:
            raise DataError(f"patch {p.shape[1:]} smaller than the {scfg.window_size}px SSIM window")
        m = p.shape[0]
        grad = np.empty_like(p)
        ms_total = 0.0
        for i in range(m):
            v, gi = ms_ssim_value_and_grad(p[i], t[i], scfg, scales)
            ms_total += v
            grad[i] = -cfg.alpha * gi / m
        value = cfg.alpha * (1.0 - ms_total / m) + (1.0 - cfg.alpha) * float(np.abs(r).sum()) / n_total
        grad += (1.0 - cfg.alpha) * np.sign(r) / n_total
    else:
        value = float((r * r).sum()) / n_total
        grad = 2.0 * r / n_total
        if kind == "mse_l1prior":
            value += 0.5 * cfg.lam * float(np.abs(p).sum()) / n_total
            grad += 0.5 * cfg.lam * np.sign(p) / n_total
        elif kind == "mse_tvprior":
            tv, g_tv = _tv_and_grad(p)
            value += 0.5 * cfg.lam * tv / n_total
            grad += 0.5 * cfg.lam * g_tv / n_total
        elif kind == "mse_wd":
            if weights is None:
                raise DataError("weight decay needs the network weights")
            value += 0.5 * cfg.beta * weights.sq_norm()
            g_w = [cfg.beta * np.asarray(q, np.float64) for q in weights.params]
    grad = grad.reshape(pred.shape).astype(out_dtype, copy=False)
    return value, grad, g_w
