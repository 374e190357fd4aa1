"""Parallel-beam CT simulation: projection, transmission noise and FBP."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .core import DataError, Image, read_raw, write_raw
from .phantom import DEFAULT_SIZE, DEFAULT_SPACING_MM, DEFAULT_SUPERSAMPLE, PhantomSpec, rasterize

MU_WATER = 0.019  # mm^-1, roughly 60 keV effective
KERNELS = ("sharp", "smooth")


@dataclass(frozen=True)
class ScanGeometry:
    n_views: int = 720
    n_detectors: int = 729
    detector_spacing_mm: float = 0.4
    i0: float = 1.0e5
    kernel: str = "sharp"

    def __post_init__(self):
        if self.n_views < 1 or self.n_detectors < 1:
            raise DataError("geometry needs at least one view and one detector")
        if not self.i0 > 0:
            raise DataError(f"i0 must be positive, got {self.i0}")
        if self.kernel not in KERNELS:
            raise DataError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_views) * (math.pi / self.n_views)

    @property
    def detector_positions(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - 0.5 * (self.n_detectors - 1)) * self.detector_spacing_mm

    @property
    def half_span_mm(self) -> float:
        return 0.5 * (self.n_detectors - 1) * self.detector_spacing_mm

    def covers(self, radius_mm: float) -> bool:
        return self.half_span_mm >= radius_mm

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Line integrals, one row per view."""

    data: np.ndarray
    detector_spacing_mm: float

    @property
    def n_views(self) -> int:
        return self.data.shape[0]

    @property
    def n_detectors(self) -> int:
        return self.data.shape[1]


def write_sinogram(sino: Sinogram, path):
    meta = {"n_views": sino.n_views, "n_detectors": sino.n_detectors,
            "detector_spacing_mm": sino.detector_spacing_mm}
    return write_raw(path, sino.data, meta)


def read_sinogram(path) -> Sinogram:
    values, meta = read_raw(path)
    try:
        nv, nd = int(meta["n_views"]), int(meta["n_detectors"])
        ds = float(meta["detector_spacing_mm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed sinogram sidecar for {path}: {exc!r}") from None
    if values.size != nv * nd:
        raise DataError(f"data-length mismatch: expected {nv * nd} values, found {values.size}")
    return Sinogram(values.astype(np.float64).reshape(nv, nd), ds)


def hu_to_mu(img: Image | np.ndarray, mu_water: float = MU_WATER) -> np.ndarray:
    if not mu_water > 0:
        raise DataError(f"mu_water must be positive, got {mu_water}")
    hu = img.as_float64() if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    return np.maximum(mu_water * (1.0 + hu / 1000.0), 0.0)


def mu_to_hu(mu: np.ndarray, mu_water: float = MU_WATER) -> np.ndarray:
    return 1000.0 * (np.asarray(mu) / mu_water - 1.0)


def forward_project(mu: np.ndarray, geom: ScanGeometry, spacing: float = DEFAULT_SPACING_MM) -> Sinogram:
    """Ray-driven line integrals with bilinear sampling at half-pixel steps."""
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    if mu.ndim != 2:
        raise DataError("attenuation map must be 2D")
    nz = np.nonzero(mu)
    if nz[0].size:
        h, w = mu.shape
        ys = (nz[0] - 0.5 * (h - 1)) * spacing
        xs = (nz[1] - 0.5 * (w - 1)) * spacing
        extent = float(np.sqrt(xs ** 2 + ys ** 2).max()) + spacing
        if not geom.covers(extent):
            raise DataError(
                f"detector half-span {geom.half_span_mm:.1f} mm does not cover the object "
                f"(extent {extent:.1f} mm)")
    data = kernels.project(mu, float(spacing), geom.angles, geom.detector_positions, 0.5 * spacing)
    return Sinogram(data, geom.detector_spacing_mm)


def add_poisson_noise(sino: Sinogram, geom: ScanGeometry, dose_fraction: float, seed: int) -> Sinogram:
    """Transmission-domain Poisson noise; zero counts are floored at one photon."""
    if not 0.0 < dose_fraction <= 1.0:
        raise DataError(f"dose fraction must lie in (0, 1], got {dose_fraction}")
    rng = np.random.default_rng(seed)
    budget = dose_fraction * geom.i0
    counts = rng.poisson(budget * np.exp(-sino.data))
    noisy = -np.log(np.maximum(counts, 1) / budget)
    return Sinogram(noisy, sino.detector_spacing_mm)


def ramp_filter(n_detectors: int, detector_spacing: float, kernel: str = "sharp") -> np.ndarray:
    """Frequency response of the discrete ramp (spatial-domain Ram-Lak), zero padded.

    ``smooth`` multiplies by a Hann window reaching zero at the Nyquist frequency.
    """
    if kernel not in KERNELS:
        raise DataError(f"unknown kernel {kernel!r}")
    size = max(64, 1 << int(math.ceil(math.log2(2 * n_detectors))))
    n = np.concatenate([np.arange(0, size // 2 + 1), np.arange(size // 2 - 1, 0, -1)])
    h = np.zeros(size)
    h[0] = 0.25 / detector_spacing ** 2
    odd = n % 2 == 1
    h[odd] = -1.0 / (math.pi * n[odd] * detector_spacing) ** 2
    response = np.real(np.fft.fft(h)) * detector_spacing
    if kernel == "smooth":
        f = np.abs(np.fft.fftfreq(size))  # cycles/sample, Nyquist = 0.5
        response = response * 0.5 * (1.0 + np.cos(2.0 * math.pi * f))
    return response


def filter_sinogram(sino: Sinogram, kernel: str = "sharp") -> np.ndarray:
    response = ramp_filter(sino.n_detectors, sino.detector_spacing_mm, kernel)
    size = response.size
    spec = np.fft.fft(sino.data, n=size, axis=1)
    return np.real(np.fft.ifft(spec * response[None, :], axis=1))[:, :sino.n_detectors]


def fbp(sino: Sinogram, geom: ScanGeometry, out_width: int = DEFAULT_SIZE, out_height: int = DEFAULT_SIZE,
        spacing: float = DEFAULT_SPACING_MM, mu_water: float = MU_WATER) -> Image:
    """Filtered backprojection back to HU."""
    if sino.n_views != geom.n_views or sino.n_detectors != geom.n_detectors:
        raise DataError(
            f"sinogram {sino.n_views}x{sino.n_detectors} does not match geometry "
            f"{geom.n_views}x{geom.n_detectors}")
    if out_width < 1 or out_height < 1 or not spacing > 0:
        raise DataError("reconstruction grid must be non-empty with positive spacing")
    if 0.5 * spacing * max(out_width, out_height) > geom.half_span_mm:
        raise DataError("reconstruction grid extends beyond the detector span")
    q = filter_sinogram(sino, geom.kernel)
    bp = kernels.backproject(np.ascontiguousarray(q), geom.angles, float(geom.detector_positions[0]),
                             float(geom.detector_spacing_mm), int(out_width), int(out_height), float(spacing))
    mu = bp * (math.pi / geom.n_views)
    return Image(mu_to_hu(mu, mu_water), spacing)


@dataclass(frozen=True)
class ScanSetup:
    """Everything needed to turn a phantom into reconstructions."""

    geometry: ScanGeometry = ScanGeometry()
    size: int = DEFAULT_SIZE
    spacing_mm: float = DEFAULT_SPACING_MM
    supersample: int = DEFAULT_SUPERSAMPLE
    mu_water: float = MU_WATER

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = self.geometry.to_dict()
        return d


def noiseless_sinogram(spec: PhantomSpec, setup: ScanSetup = ScanSetup()) -> Sinogram:
    truth = rasterize(spec, setup.size, setup.size, setup.spacing_mm, setup.supersample)
    return forward_project(hu_to_mu(truth, setup.mu_water), setup.geometry, setup.spacing_mm)


def reconstruct(sino: Sinogram, setup: ScanSetup = ScanSetup()) -> Image:
    return fbp(sino, setup.geometry, setup.size, setup.size, setup.spacing_mm, setup.mu_water)


def scan(spec: PhantomSpec, setup: ScanSetup = ScanSetup(), dose_fraction: float | None = 1.0,
         seed: int = 0, sino: Sinogram | None = None) -> Image:
    """One reconstruction; ``dose_fraction=None`` skips noise injection."""
    if sino is None:
        sino = noiseless_sinogram(spec, setup)
    if dose_fraction is not None:
        sino = add_poisson_noise(sino, setup.geometry, dose_fraction, seed)
    return reconstruct(sino, setup)


def make_noise_ensemble(spec: PhantomSpec, geom: ScanGeometry | ScanSetup, n: int, dose_fraction: float,
                        seed: int, threads: int = 1, sino: Sinogram | None = None) -> list[Image]:
    """``n`` independent noisy reconstructions seeded ``seed + k``.

    Each realization owns its generator, so the result does not depend on
    ``threads``.
    """
    if n < 2:
        raise DataError(f"an ensemble needs at least 2 realizations, got {n}")
    setup = geom if isinstance(geom, ScanSetup) else ScanSetup(geometry=geom)
    if sino is None:
        sino = noiseless_sinogram(spec, setup)

    def one(k):
        return scan(spec, setup, dose_fraction, seed + k, sino=sino)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(n)))
    return [one(k) for k in range(n)]
