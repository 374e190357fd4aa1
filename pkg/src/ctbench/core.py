"""Image containers, regions of interest and the raw ``.f32`` + JSON file format."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed input data (bad files, mismatched shapes, out-of-range regions)."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values."""


@dataclass(frozen=True, eq=False)
class Image:
    """2D grid of HU values, row-major with the origin at the top-left pixel.

    ``data`` is stored as float32, which is also the on-disk payload type, so
    ``read_image(write_image(img))`` is the identity.
    """

    data: np.ndarray
    pixel_spacing_mm: float = 0.5

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise DataError(f"image data must be a non-empty 2D grid, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError("image contains non-finite values")
        if not self.pixel_spacing_mm > 0:
            raise DataError(f"pixel spacing must be positive, got {self.pixel_spacing_mm}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "pixel_spacing_mm", float(self.pixel_spacing_mm))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def as_float64(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def with_data(self, data) -> "Image":
        return Image(data, self.pixel_spacing_mm)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return (self.pixel_spacing_mm == other.pixel_spacing_mm
                and self.shape == other.shape
                and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32)))

    def __hash__(self):
        return hash((self.shape, self.pixel_spacing_mm, self.data.tobytes()))


@dataclass(frozen=True)
class Roi:
    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DataError(f"ROI extents must be positive, got {self.w}x{self.h}")
        if self.x0 < 0 or self.y0 < 0:
            raise DataError(f"ROI origin must be non-negative, got ({self.x0}, {self.y0})")

    @classmethod
    def centered(cls, width: int, height: int, size: int) -> "Roi":
        return cls((width - size) // 2, (height - size) // 2, size, size)

    def check(self, img: Image) -> None:
        if self.x0 + self.w > img.width or self.y0 + self.h > img.height:
            raise DataError(f"ROI {self} exceeds image bounds {img.width}x{img.height}")

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y0 + self.h), slice(self.x0, self.x0 + self.w)


@dataclass(frozen=True)
class DisplayWindow:
    width_hu: float
    level_hu: float

    def __post_init__(self):
        if not self.width_hu > 0:
            raise DataError(f"window width must be positive, got {self.width_hu}")

    @classmethod
    def from_range(cls, lo: float, hi: float) -> "DisplayWindow":
        return cls(hi - lo, 0.5 * (lo + hi))


# Fig. 1-style soft-tissue window and the [0, 122] HU difference-image window.
SOFT_TISSUE_WINDOW = DisplayWindow(491.0, 62.0)
DIFFERENCE_WINDOW = DisplayWindow.from_range(0.0, 122.0)


def extract_roi(img: Image, roi: Roi) -> Image:
    roi.check(img)
    return Image(img.data[roi.slices()], img.pixel_spacing_mm)


def window_to_display(img: Image | np.ndarray, win: DisplayWindow) -> np.ndarray:
    """Map ``[level - width/2, level + width/2]`` HU linearly onto 0..255.

    Values are rounded half-up and clamped, so HU == level lands on 128.
    """
    data = img.data if isinstance(img, Image) else np.asarray(img)
    lo = win.level_hu - 0.5 * win.width_hu
    scaled = (data.astype(np.float64) - lo) * (255.0 / win.width_hu)
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def _pair_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".f32", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".f32"), p.with_name(p.name + ".json")


def write_raw(path, data: np.ndarray, meta: dict) -> Path:
    """Write a little-endian float32 payload and its JSON sidecar."""
    payload, sidecar = _pair_paths(path)
    payload.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(data, dtype="<f4")
    tmp = payload.with_name(payload.name + ".tmp")
    tmp.write_bytes(arr.tobytes())
    os.replace(tmp, payload)
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    return payload


def read_raw(path) -> tuple[np.ndarray, dict]:
    payload, sidecar = _pair_paths(path)
    if not payload.exists():
        raise DataError(f"missing payload file: {payload}")
    if not sidecar.exists():
        raise DataError(f"missing sidecar file: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed sidecar {sidecar}: {exc}") from None
    if not isinstance(meta, dict):
        raise DataError(f"malformed sidecar {sidecar}: expected a JSON object")
    raw = payload.read_bytes()
    if len(raw) % 4:
        raise DataError(f"data-length mismatch: {payload} is not a whole number of float32 values")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32), meta


def write_image(img: Image, path) -> Path:
    meta = {"width": img.width, "height": img.height,
            "pixel_spacing_mm": img.pixel_spacing_mm, "units": "HU"}
    return write_raw(path, img.data, meta)


def read_image(path) -> Image:
    values, meta = read_raw(path)
    try:
        width, height = int(meta["width"]), int(meta["height"])
        spacing = float(meta["pixel_spacing_mm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed sidecar for {path}: {exc!r}") from None
    if width <= 0 or height <= 0:
        raise DataError(f"malformed sidecar for {path}: non-positive dimensions")
    if values.size != width * height:
        raise DataError(
            f"data-length mismatch: sidecar declares {width}x{height}={width * height} "
            f"values, payload holds {values.size}")
    if not np.isfinite(values).all():
        raise DataError(f"non-finite values in {path}")
    return Image(values.reshape(height, width), spacing)


def save_png(gray: np.ndarray, path) -> Path:
    from PIL import Image as PILImage

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.asarray(gray, dtype=np.uint8)).save(path)
    return path


def export_windowed_png(img: Image, win: DisplayWindow, path) -> Path:
    return save_png(window_to_display(img, win), path)


def json_safe(obj):
    """Replace non-finite floats by the strings "inf", "-inf" and "nan" (recursively)."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj
