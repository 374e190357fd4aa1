"""Analytic disk phantoms and their anti-aliased rasterization."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .core import DataError, Image

DEFAULT_SIZE = 512
DEFAULT_SPACING_MM = 0.5
DEFAULT_SUPERSAMPLE = 8

# Contrast levels of the simulated CATPHAN-style insert module.
CONTRAST_LEVELS_HU = (900.0, 340.0, 120.0, -35.0)


@dataclass(frozen=True)
class DiskInsert:
    """Disk centred ``(cx_mm, cy_mm)`` from the image centre; +y points down the rows."""

    cx_mm: float
    cy_mm: float
    radius_mm: float
    hu: float

    def __post_init__(self):
        if not self.radius_mm > 0:
            raise DataError(f"insert radius must be positive, got {self.radius_mm}")


@dataclass(frozen=True)
class PhantomSpec:
    background_hu: float
    body_radius_mm: float
    body_hu: float
    inserts: tuple[DiskInsert, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "inserts", tuple(self.inserts))
        if not self.body_radius_mm > 0:
            raise DataError(f"body radius must be positive, got {self.body_radius_mm}")
        for ins in self.inserts:
            if math.hypot(ins.cx_mm, ins.cy_mm) + ins.radius_mm > self.body_radius_mm:
                raise DataError(f"insert {ins} extends outside the body")
        for i, a in enumerate(self.inserts):
            for b in self.inserts[i + 1:]:
                if math.hypot(a.cx_mm - b.cx_mm, a.cy_mm - b.cy_mm) < a.radius_mm + b.radius_mm:
                    raise DataError(f"inserts {a} and {b} overlap")

    def hu_at(self, x_mm, y_mm) -> np.ndarray:
        """Point-sampled ground truth; boundaries belong to the inner region."""
        x = np.asarray(x_mm, dtype=np.float64)
        y = np.asarray(y_mm, dtype=np.float64)
        out = np.full(np.broadcast(x, y).shape, self.background_hu, dtype=np.float64)
        out[np.hypot(x, y) <= self.body_radius_mm] = self.body_hu
        for ins in self.inserts:
            out[np.hypot(x - ins.cx_mm, y - ins.cy_mm) <= ins.radius_mm] = ins.hu
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inserts"] = [asdict(i) for i in self.inserts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        try:
            return cls(float(d["background_hu"]), float(d["body_radius_mm"]), float(d["body_hu"]),
                       tuple(DiskInsert(**{k: float(v) for k, v in i.items()})
                             for i in d.get("inserts", [])))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed phantom description: {exc!r}") from None


def save_phantom(spec: PhantomSpec, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    return path


def load_phantom(path) -> PhantomSpec:
    try:
        return PhantomSpec.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read phantom {path}: {exc}") from None


def make_contrast_phantom(body_radius_mm: float = 100.0, levels=CONTRAST_LEVELS_HU) -> PhantomSpec:
    """Water body in air with the four contrast inserts on a ring.

    Ring radius is 0.55 of the body radius and insert radius 0.12 of it; the
    inserts sit at 0, 90, 180 and 270 degrees in the order 900, 340, 120, -35 HU
    unless other ``levels`` are given (one insert per level, evenly spaced).
    """
    ring = 0.55 * body_radius_mm
    r = 0.12 * body_radius_mm
    inserts = []
    if not levels:
        raise DataError("need at least one contrast level")
    for k, hu in enumerate(levels):
        a = k * 2 * math.pi / len(levels)
        inserts.append(DiskInsert(round(ring * math.cos(a), 12), round(ring * math.sin(a), 12), r, float(hu)))
    return PhantomSpec(-1000.0, body_radius_mm, 0.0, tuple(inserts))


def make_water_cylinder(body_radius_mm: float = 100.0) -> PhantomSpec:
    return PhantomSpec(-1000.0, body_radius_mm, 0.0, ())


def make_random_phantom(seed: int, body_radius_mm: float = 100.0, n_inserts=(3, 7),
                        hu_range=(-150.0, 1000.0)) -> PhantomSpec:
    """Water body with randomly placed non-overlapping disks; used as training anatomy."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(n_inserts[0], n_inserts[1] + 1))
    inserts: list[DiskInsert] = []
    attempts = 0
    while len(inserts) < count and attempts < 1000:
        attempts += 1
        r = float(rng.uniform(3.0, 0.18 * body_radius_mm))
        rho = float(rng.uniform(0.0, body_radius_mm - r - 2.0))
        phi = float(rng.uniform(0.0, 2 * math.pi))
        cand = DiskInsert(rho * math.cos(phi), rho * math.sin(phi), r, float(rng.uniform(*hu_range)))
        if all(math.hypot(cand.cx_mm - o.cx_mm, cand.cy_mm - o.cy_mm) > cand.radius_mm + o.radius_mm + 1.0
               for o in inserts):
            inserts.append(cand)
    return PhantomSpec(-1000.0, body_radius_mm, 0.0, tuple(inserts))


def region_fractions(spec: PhantomSpec, width: int, height: int, spacing: float,
                     supersample: int = DEFAULT_SUPERSAMPLE) -> list[tuple[float, np.ndarray]]:
    """Area fraction of every region (background, body, each insert) per pixel."""
    if not 1 <= supersample <= 16:
        raise DataError(f"supersample must be in 1..16, got {supersample}")
    half_w = 0.5 * width * spacing
    half_h = 0.5 * height * spacing
    if spec.body_radius_mm > min(half_w, half_h):
        raise DataError(
            f"phantom body (radius {spec.body_radius_mm} mm) exceeds the field of view "
            f"({2 * half_w:g} x {2 * half_h:g} mm)")
    body = kernels.disk_coverage(width, height, spacing, 0.0, 0.0, spec.body_radius_mm, supersample)
    covers = [kernels.disk_coverage(width, height, spacing, i.cx_mm, i.cy_mm, i.radius_mm, supersample)
              for i in spec.inserts]
    body_only = body - sum(covers) if covers else body
    fractions = [(spec.background_hu, 1.0 - body), (spec.body_hu, np.clip(body_only, 0.0, 1.0))]
    fractions += [(i.hu, c) for i, c in zip(spec.inserts, covers)]
    return fractions


def rasterize(spec: PhantomSpec, width: int = DEFAULT_SIZE, height: int = DEFAULT_SIZE,
              spacing: float = DEFAULT_SPACING_MM, supersample: int = DEFAULT_SUPERSAMPLE) -> Image:
    """Area-weighted HU per pixel; pixels wholly inside one region get its HU exactly."""
    fractions = region_fractions(spec, width, height, spacing, supersample)
    out = np.zeros((height, width))
    for hu, frac in fractions:
        out += hu * frac
    for hu, frac in fractions:
        out[frac == 1.0] = hu
    lo = min(hu for hu, _ in fractions)
    hi = max(hu for hu, _ in fractions)
    return Image(np.clip(out, lo, hi), spacing)
