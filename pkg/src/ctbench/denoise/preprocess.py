"""Intensity normalization, dose blending and patch extraction with augmentation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import zoom

from ..core import DataError, Image

NORMALIZATIONS = ("unity", "normF")
UNITY_RANGE = (-1024.0, 3072.0)
NORMF_OFFSET = 1024.0
PATCH_SIZES = (32, 55, 64, 96)
SCALE_FACTORS = (0.6, 0.8)


@dataclass(frozen=True)
class AugmentConfig:
    scale: bool = False
    rotate_flip: bool = False
    dose_blend: bool = False
    gamma_low: float = 0.5
    gamma_high: float = 1.2

    def __post_init__(self):
        if not self.gamma_low < self.gamma_high:
            raise DataError(f"gamma_low ({self.gamma_low}) must be below gamma_high ({self.gamma_high})")

    @property
    def any(self) -> bool:
        return self.scale or self.rotate_flip or self.dose_blend


@dataclass(frozen=True)
class PreprocessConfig:
    normalization: str = "unity"
    patch_size: int = 55
    patch_stride: int = 55
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    lo: float = UNITY_RANGE[0]
    hi: float = UNITY_RANGE[1]
    allow_any_patch_size: bool = False

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise DataError(f"unknown normalization {self.normalization!r}; expected {NORMALIZATIONS}")
        if self.patch_size < 1 or self.patch_stride < 1:
            raise DataError("patch size and stride must be positive")
        if self.patch_size not in PATCH_SIZES and not self.allow_any_patch_size:
            raise DataError(f"patch size {self.patch_size} not in {PATCH_SIZES}; "
                            "set allow_any_patch_size to override")
        if self.normalization == "unity" and not self.hi > self.lo:
            raise DataError(f"unity normalization needs hi > lo, got lo={self.lo}, hi={self.hi}")

    @property
    def data_range(self) -> float:
        """Span of the model domain, used as the MS-SSIM dynamic range."""
        return 1.0 if self.normalization == "unity" else self.hi - self.lo

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        d = dict(d)
        d["augment"] = AugmentConfig(**d.get("augment", {}))
        return cls(**d)


def normalize_array(x, mode: str, lo: float = UNITY_RANGE[0], hi: float = UNITY_RANGE[1]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if mode == "unity":
        if not hi > lo:
            raise DataError(f"unity normalization needs hi > lo, got lo={lo}, hi={hi}")
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    if mode == "normF":
        return np.maximum(x + NORMF_OFFSET, 0.0)
    raise DataError(f"unknown normalization {mode!r}")


def denormalize_array(x, mode: str, lo: float = UNITY_RANGE[0], hi: float = UNITY_RANGE[1]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if mode == "unity":
        return x * (hi - lo) + lo
    if mode == "normF":
        return x - NORMF_OFFSET
    raise DataError(f"unknown normalization {mode!r}")


def normalize(img: Image, mode: str, lo: float = UNITY_RANGE[0], hi: float = UNITY_RANGE[1]) -> Image:
    """HU -> model domain: ``unity`` maps [lo, hi] onto [0, 1]; ``normF`` adds 1024 HU."""
    return img.with_data(normalize_array(img.data, mode, lo, hi))


def denormalize(img: Image, mode: str, lo: float = UNITY_RANGE[0], hi: float = UNITY_RANGE[1]) -> Image:
    return img.with_data(denormalize_array(img.data, mode, lo, hi))


def dose_blend(nd: Image, ld: Image, gamma: float) -> Image:
    """Synthetic intermediate dose: nd + gamma * (ld - nd)."""
    if nd.shape != ld.shape:
        raise DataError(f"dimension mismatch: {nd.shape} vs {ld.shape}")
    a, b = nd.as_float64(), ld.as_float64()
    return nd.with_data(a + gamma * (b - a))


@dataclass(eq=False)
class PatchSet:
    """Co-located low-dose / normal-dose patches in the model domain, shape (N, p, p)."""

    ld: np.ndarray
    nd: np.ndarray

    def __len__(self) -> int:
        return self.ld.shape[0]

    def __iter__(self):
        return iter(zip(self.ld, self.nd))

    def __getitem__(self, i):
        return self.ld[i], self.nd[i]


def _grid(a: np.ndarray, b: np.ndarray, size: int, stride: int):
    h, w = a.shape
    out_a, out_b = [], []
    for y in range(0, h - size + 1, stride):
        for x in range(0, w - size + 1, stride):
            out_a.append(a[y:y + size, x:x + size])
            out_b.append(b[y:y + size, x:x + size])
    return out_a, out_b


def make_patch_set(pairs, cfg: PreprocessConfig, seed: int = 0) -> PatchSet:
    """Cut (LD, ND) image pairs into co-located model-domain patches.

    Scaling adds bilinear 0.6x and 0.8x copies of each pair before patching.
    Dose blending duplicates every patch pair with an LD patch blended at
    gamma ~ U[gamma_low, gamma_high]. Rotate/flip then emits one randomly
    rotated (90/180/270 degrees) and flipped (left-right or up-down) copy of
    every pair, so it exactly doubles the count.
    """
    rng = np.random.default_rng(seed)
    aug = cfg.augment
    p = cfg.patch_size
    ld_list, nd_list = [], []
    for ld, nd in pairs:
        if ld.shape != nd.shape:
            raise DataError(f"LD/ND size mismatch: {ld.shape} vs {nd.shape}")
        if min(ld.shape) < p:
            raise DataError(f"image {ld.shape} smaller than patch size {p}")
        a, b = ld.as_float64(), nd.as_float64()
        versions = [(a, b)]
        if aug.scale:
            for f in SCALE_FACTORS:
                versions.append((zoom(a, f, order=1), zoom(b, f, order=1)))
        for va, vb in versions:
            if min(va.shape) < p:
                continue
            pa, pb = _grid(va, vb, p, cfg.patch_stride)
            ld_list += pa
            nd_list += pb
    if not ld_list:
        raise DataError("no patches could be extracted")
    ld_arr = np.stack(ld_list)
    nd_arr = np.stack(nd_list)
    if aug.dose_blend:
        gamma = rng.uniform(aug.gamma_low, aug.gamma_high, size=len(ld_arr))[:, None, None]
        ld_arr = np.concatenate([ld_arr, nd_arr + gamma * (ld_arr - nd_arr)])
        nd_arr = np.concatenate([nd_arr, nd_arr])
    if aug.rotate_flip:
        turns = rng.integers(1, 4, size=len(ld_arr))
        flips = rng.integers(0, 2, size=len(ld_arr))
        rot_ld, rot_nd = [], []
        for pa, pb, k, fl in zip(ld_arr, nd_arr, turns, flips):
            flip = np.fliplr if fl else np.flipud
            rot_ld.append(flip(np.rot90(pa, k)))
            rot_nd.append(flip(np.rot90(pb, k)))
        ld_arr = np.concatenate([ld_arr, np.stack(rot_ld)])
        nd_arr = np.concatenate([nd_arr, np.stack(rot_nd)])
    lo, hi = cfg.lo, cfg.hi
    return PatchSet(normalize_array(ld_arr, cfg.normalization, lo, hi).astype(np.float32),
                    normalize_array(nd_arr, cfg.normalization, lo, hi).astype(np.float32))


def load_training_manifest(path) -> list:
    """Read ``[{"ld": path, "nd": path}, ...]``; relative paths resolve against the manifest."""
    import json
    from pathlib import Path

    from ..core import read_image

    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    except ValueError:
        raise DataError(f"manifest {path} is not valid JSON") from None
    if not isinstance(entries, list) or not entries:
        raise DataError(f"manifest {path} must be a non-empty list of {{ld, nd}} pairs")
    pairs = []
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "ld" not in e or "nd" not in e:
            raise DataError(f"manifest entry {i} needs 'ld' and 'nd' keys")
        pairs.append(tuple(read_image(p if Path(p).is_absolute() else path.parent / p)
                           for p in (e["ld"], e["nd"])))
    return pairs
