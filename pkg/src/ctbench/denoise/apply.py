"""Uniform entry point for every denoiser kind, always HU in and HU out."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..core import DataError, Image, read_image
from .classical import gaussian_denoise, tv_denoise
from .cnn3 import Cnn3Weights, cnn3_forward, load_weights
from .preprocess import denormalize_array, normalize_array

DENOISER_KINDS = ("identity", "gaussian", "tv", "cnn3", "external")


def cnn3_denoise(img: Image, w: Cnn3Weights) -> Image:
    """Normalize with the recorded mode, run the network, map back to HU."""
    if w.normalization is None:
        raise DataError("weights carry no normalization metadata; cannot map HU to the model domain")
    lo = w.lo if w.lo is not None else -1024.0
    hi = w.hi if w.hi is not None else 3072.0
    x = normalize_array(img.data, w.normalization, lo, hi).astype(np.float32)
    y = cnn3_forward(x, w)
    return img.with_data(denormalize_array(y, w.normalization, lo, hi))


def make_denoiser(kind: str, **params):
    """Build ``f(img, name=None) -> Image``.

    gaussian: ``sigma_px``; tv: ``lam`` and ``iterations``; cnn3: ``weights``
    (Cnn3Weights or a path); external: ``directory`` holding ``<name>.f32``
    images, matched to inputs by name.
    """
    if kind == "identity":
        return lambda img, name=None: img
    if kind == "gaussian":
        sigma = float(params.get("sigma_px", 1.0))
        return lambda img, name=None: gaussian_denoise(img, sigma)
    if kind == "tv":
        lam = float(params.get("lam", 20.0))
        iters = int(params.get("iterations", 100))
        return lambda img, name=None: tv_denoise(img, lam, iters)
    if kind == "cnn3":
        w = params.get("weights")
        if w is None:
            raise DataError("cnn3 denoiser needs weights")
        if not isinstance(w, Cnn3Weights):
            w = load_weights(w)
        return lambda img, name=None: cnn3_denoise(img, w)
    if kind == "external":
        directory = params.get("directory")
        if directory is None:
            raise DataError("external denoiser needs a directory")
        directory = Path(directory)

        def lookup(img, name=None):
            if name is None:
                raise DataError("external outputs are matched by name; no name given")
            path = directory / f"{Path(name).stem}.f32"
            if not path.exists():
                raise DataError(f"external output missing: {path}")
            out = read_image(path)
            if out.shape != img.shape:
                raise DataError(f"external output {path} has shape {out.shape}, input is {img.shape}")
            return out

        return lookup
    raise DataError(f"unknown denoiser kind {kind!r}; expected one of {DENOISER_KINDS}")


def apply_denoiser(kind: str, inputs: dict, **params) -> dict:
    """Denoise a name -> Image mapping; names are preserved."""
    f = make_denoiser(kind, **params)
    return {name: f(img, name) for name, img in inputs.items()}


def describe(kind: str, **params) -> dict:
    """JSON-safe description of a denoiser for manifests and cache keys."""
    d = {"kind": kind}
    for k, v in params.items():
        if isinstance(v, Cnn3Weights):
            d[k] = {"digest": v.digest(), "normalization": v.normalization, "lo": v.lo, "hi": v.hi}
        else:
            d[k] = str(v) if isinstance(v, Path) else v
    json.dumps(d)
    return d
