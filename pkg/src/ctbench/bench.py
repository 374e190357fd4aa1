"""CT bench tests: contrast-dependent MTF, NPS, HU line profiles, difference images."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .core import DataError, Image, Roi
from .phantom import DiskInsert, PhantomSpec

MTF_OVERSAMPLE = 8
MTF_SMOOTH_BINS = 3
MIN_MTF_CONTRAST_HU = 20.0


@dataclass(frozen=True, eq=False)
class MtfCurve:
    freqs: np.ndarray  # lp/mm
    values: np.ndarray
    mtf50: float  # lp/mm; equals freqs[-1] if the curve never drops to 0.5
    contrast_hu: float = math.nan
    crossed: bool = True

    def at(self, f) -> np.ndarray:
        return np.interp(f, self.freqs, self.values)


@dataclass(frozen=True, eq=False)
class NpsResult:
    nps2d: np.ndarray  # HU^2 mm^2, DC at the centre (fftshift order)
    u: np.ndarray  # lp/mm along columns
    v: np.ndarray  # lp/mm along rows
    radial_freqs: np.ndarray  # k * df, k = 0..N/2 (DC included)
    radial_values: np.ndarray
    n_realizations: int
    roi_size: tuple[int, int]
    pixel_spacing_mm: float

    @property
    def df(self) -> float:
        return float(self.radial_freqs[1] - self.radial_freqs[0])

    def integral(self) -> float:
        """Sum of the 2D NPS times the frequency-cell area (equals noise variance)."""
        du = 1.0 / (self.roi_size[1] * self.pixel_spacing_mm)
        dv = 1.0 / (self.roi_size[0] * self.pixel_spacing_mm)
        return float(self.nps2d.sum() * du * dv)

    def curve(self) -> tuple[np.ndarray, np.ndarray]:
        """Radial curve without the DC bin."""
        return self.radial_freqs[1:], self.radial_values[1:]


@dataclass(frozen=True, eq=False)
class LineProfile:
    positions_mm: np.ndarray
    values_hu: np.ndarray
    reference_hu: np.ndarray
    insert: DiskInsert | None = None
    axis: str = "horizontal"


@dataclass(frozen=True)
class HuAccuracy:
    plateau_bias: float
    plateau_mad: float
    edge_overshoot: float

    def to_dict(self) -> dict:
        return {"plateau_bias": self.plateau_bias, "plateau_mad": self.plateau_mad,
                "edge_overshoot": self.edge_overshoot}


def _first_downward_crossing(freqs, values, level=0.5):
    below = np.nonzero((values[:-1] >= level) & (values[1:] < level))[0]
    if below.size == 0:
        return float(freqs[-1]), False
    i = below[0]
    f0, f1, v0, v1 = freqs[i], freqs[i + 1], values[i], values[i + 1]
    return float(f0 + (v0 - level) * (f1 - f0) / (v0 - v1)), True


def mtf50_of(freqs, values) -> float:
    return _first_downward_crossing(np.asarray(freqs), np.asarray(values))[0]


def _pixel_coords(img: Image, x_mm, y_mm):
    s = img.pixel_spacing_mm
    return (np.asarray(y_mm) / s + 0.5 * (img.height - 1),
            np.asarray(x_mm) / s + 0.5 * (img.width - 1))


def edge_spread(img: Image, insert: DiskInsert, half_width_mm: float | None = None):
    """Radially binned ESF around the disk edge; returns (radii, esf)."""
    s = img.pixel_spacing_mm
    R = insert.radius_mm
    h = half_width_mm if half_width_mm is not None else min(0.9 * R, 20.0 * s)
    dr = s / MTF_OVERSAMPLE
    n_bins = int(round(2.0 * h / dr))
    r_lo = R - 0.5 * n_bins * dr
    yy = (np.arange(img.height) - 0.5 * (img.height - 1)) * s - insert.cy_mm
    xx = (np.arange(img.width) - 0.5 * (img.width - 1)) * s - insert.cx_mm
    r = np.hypot(xx[None, :], yy[:, None])
    idx = np.floor((r - r_lo) / dr).astype(np.intp)
    keep = (idx >= 0) & (idx < n_bins)
    counts = np.bincount(idx[keep], minlength=n_bins)
    sums = np.bincount(idx[keep], weights=img.as_float64()[keep], minlength=n_bins)
    centres = r_lo + (np.arange(n_bins) + 0.5) * dr
    filled = counts > 0
    if filled.sum() < 2:
        raise DataError("too few pixels around the disk edge")
    esf = np.interp(centres, centres[filled], sums[filled] / counts[filled])
    return centres, esf


def mtf_from_disk(img: Image, insert: DiskInsert, background_hu: float,
                  half_width_mm: float | None = None) -> MtfCurve:
    """Circular-edge MTF of one disk insert.

    Pixels are binned by distance from the disk centre at 1/8-pixel resolution
    into an edge-spread function, smoothed over 3 bins, differentiated,
    Hann-tapered and Fourier transformed; the magnitude is normalised at DC.
    """
    contrast = insert.hu - background_hu
    if abs(contrast) < MIN_MTF_CONTRAST_HU:
        raise DataError(f"insert contrast {contrast:+.1f} HU is below the "
                        f"{MIN_MTF_CONTRAST_HU:g} HU needed for a stable MTF")
    s = img.pixel_spacing_mm
    h = half_width_mm if half_width_mm is not None else min(0.9 * insert.radius_mm, 20.0 * s)
    half_w = 0.5 * img.width * s
    half_h = 0.5 * img.height * s
    reach = insert.radius_mm + h
    if (abs(insert.cx_mm) + reach > half_w - 0.5 * s or abs(insert.cy_mm) + reach > half_h - 0.5 * s):
        raise DataError(f"disk {insert} (with its edge window) is clipped by the image border")
    _, esf = edge_spread(img, insert, h)
    kernel = np.ones(MTF_SMOOTH_BINS) / MTF_SMOOTH_BINS
    esf = np.convolve(np.pad(esf, MTF_SMOOTH_BINS // 2, mode="edge"), kernel, mode="valid")
    lsf = np.gradient(esf)
    lsf = lsf * np.hanning(lsf.size)
    dr = s / MTF_OVERSAMPLE
    n_fft = max((1 << int(math.ceil(math.log2(lsf.size)))) * 8, 4096)
    spectrum = np.abs(np.fft.rfft(lsf, n=n_fft))
    freqs = np.fft.rfftfreq(n_fft, d=dr)
    if spectrum[0] == 0.0:
        raise DataError("edge has no net contrast; MTF undefined")
    values = spectrum / spectrum[0]
    keep = freqs <= 0.5 / s + 1e-12
    freqs, values = freqs[keep], values[keep]
    f50, crossed = _first_downward_crossing(freqs, values)
    return MtfCurve(freqs, values, f50, contrast_hu=float(insert.hu), crossed=crossed)


def _detrend(roi: np.ndarray, mode: str) -> np.ndarray:
    if mode == "none":
        return roi
    if mode == "mean":
        return roi - roi.mean()
    if mode == "plane":
        ny, nx = roi.shape
        yy, xx = np.mgrid[0:ny, 0:nx]
        basis = np.stack([np.ones(roi.size), (xx - 0.5 * (nx - 1)).ravel(), (yy - 0.5 * (ny - 1)).ravel()], 1)
        coef, *_ = np.linalg.lstsq(basis, roi.ravel(), rcond=None)
        return roi - (basis @ coef).reshape(roi.shape)
    raise DataError(f"unknown detrend mode {mode!r}")


def radial_average(nps2d: np.ndarray, n: int) -> np.ndarray:
    """Mean over annuli of width df centred on k*df, k = 0..n//2 (input in fftshift order)."""
    ny, nx = nps2d.shape
    ky = np.fft.fftshift(np.fft.fftfreq(ny)) * ny * (n / ny)
    kx = np.fft.fftshift(np.fft.fftfreq(nx)) * nx * (n / nx)
    k = np.rint(np.hypot(kx[None, :], ky[:, None])).astype(np.intp)
    n_bins = n // 2 + 1
    keep = k < n_bins
    counts = np.bincount(k[keep], minlength=n_bins)
    sums = np.bincount(k[keep], weights=nps2d[keep], minlength=n_bins)
    return sums / np.maximum(counts, 1)


def nps_estimate(realizations, roi: Roi, detrend: str = "mean") -> NpsResult:
    """Ensemble noise power spectrum inside ``roi``.

    Noise images are realizations minus the ensemble mean, scaled by
    sqrt(n/(n-1)); each ROI is detrended (``mean`` by default, ``plane`` fits
    and removes a plane) before the periodogram average.
    """
    realizations = list(realizations)
    n = len(realizations)
    if n < 2:
        raise DataError(f"NPS needs at least 2 realizations, got {n}")
    first = realizations[0]
    for r in realizations[1:]:
        if r.shape != first.shape:
            raise DataError("realizations differ in size")
    roi.check(first)
    stack = np.stack([r.as_float64()[roi.slices()] for r in realizations])
    noise = (stack - stack.mean(axis=0)) * math.sqrt(n / (n - 1))
    s = first.pixel_spacing_mm
    ny, nx = roi.h, roi.w
    power = np.zeros((ny, nx))
    for img in noise:
        power += np.abs(np.fft.fft2(_detrend(img, detrend))) ** 2
    nps = np.fft.fftshift(power / n) * (s * s / (nx * ny))
    u = np.fft.fftshift(np.fft.fftfreq(nx, d=s))
    v = np.fft.fftshift(np.fft.fftfreq(ny, d=s))
    radial = radial_average(nps, nx)
    df = 1.0 / (nx * s)
    return NpsResult(nps, u, v, np.arange(radial.size) * df, radial, n, (ny, nx), s)


def disk_profile(img: Image, spec: PhantomSpec, disk: DiskInsert, axis: str = "horizontal") -> LineProfile:
    """Bilinear samples along a line through a disk centre, 3 diameters long (clamped to the image)."""
    if axis not in ("horizontal", "vertical"):
        raise DataError(f"axis must be horizontal or vertical, got {axis!r}")
    s = img.pixel_spacing_mm
    n = int(round(6.0 * disk.radius_mm / s))
    pos = (np.arange(n) - 0.5 * (n - 1)) * s
    if axis == "horizontal":
        x, y = disk.cx_mm + pos, np.full(n, disk.cy_mm)
    else:
        x, y = np.full(n, disk.cx_mm), disk.cy_mm + pos
    rows, cols = _pixel_coords(img, x, y)
    inside = (rows >= 0) & (rows <= img.height - 1) & (cols >= 0) & (cols <= img.width - 1)
    pos, x, y, rows, cols = pos[inside], x[inside], y[inside], rows[inside], cols[inside]
    values = map_coordinates(img.as_float64(), [rows, cols], order=1, mode="nearest")
    return LineProfile(pos, values, spec.hu_at(x, y), disk, axis)


def line_profile(img: Image, spec: PhantomSpec, insert_index: int, axis: str = "horizontal") -> LineProfile:
    """Profile through insert ``insert_index``; see :func:`disk_profile`."""
    if not 0 <= insert_index < len(spec.inserts):
        raise DataError(f"insert index {insert_index} out of range (phantom has {len(spec.inserts)})")
    return disk_profile(img, spec, spec.inserts[insert_index], axis)


def body_profile(img: Image, spec: PhantomSpec, axis: str = "horizontal") -> LineProfile:
    """Profile across the whole body disk, e.g. the water cylinder."""
    return disk_profile(img, spec, DiskInsert(0.0, 0.0, spec.body_radius_mm, spec.body_hu), axis)


def hu_accuracy(profile: LineProfile, radius_mm: float | None = None) -> HuAccuracy:
    """Plateau bias / mean absolute deviation over the central half of the disk."""
    if radius_mm is None:
        if profile.insert is None:
            raise DataError("radius needed to locate the plateau")
        radius_mm = profile.insert.radius_mm
    pos = np.asarray(profile.positions_mm)
    if pos.size < 2 or pos.size != len(profile.values_hu) or pos.size != len(profile.reference_hu):
        raise DataError("degenerate profile")
    plateau = np.abs(pos) <= 0.5 * radius_mm
    if plateau.sum() < 5:
        raise DataError(f"profile has only {int(plateau.sum())} plateau samples; need 5")
    diff = np.asarray(profile.values_hu, dtype=np.float64) - np.asarray(profile.reference_hu, dtype=np.float64)
    return HuAccuracy(float(diff[plateau].mean()), float(np.abs(diff[plateau]).mean()),
                      float(np.max(profile.values_hu) - np.max(profile.reference_hu)))


def abs_diff(a: Image, b: Image) -> Image:
    if a.shape != b.shape:
        raise DataError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return Image(np.abs(a.as_float64() - b.as_float64()), a.pixel_spacing_mm)


def mean_image(images) -> Image:
    images = list(images)
    return Image(np.mean([i.as_float64() for i in images], axis=0), images[0].pixel_spacing_mm)


@dataclass
class ContrastMtf:
    """MTF curves keyed by insert HU."""

    curves: dict[float, MtfCurve] = field(default_factory=dict)

    @property
    def mtf50(self) -> dict[float, float]:
        return {hu: c.mtf50 for hu, c in self.curves.items()}


def contrast_mtf(img: Image, spec: PhantomSpec) -> ContrastMtf:
    return ContrastMtf({ins.hu: mtf_from_disk(img, ins, spec.body_hu) for ins in spec.inserts})
