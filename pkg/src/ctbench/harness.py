"""Hyperparameter selection: greedy stage-wise search with global or bench objectives.

Two objectives are provided. ``global`` ranks candidates by tuning-set PSNR
(SSIM breaks near-ties). ``bench`` ranks them by a composite of resolution,
noise texture and HU accuracy measured on simulated phantoms relative to the
FBP baseline, and zeroes any candidate whose PSNR falls below the LDCT input.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .bench import (ContrastMtf, HuAccuracy, MtfCurve, NpsResult, contrast_mtf, hu_accuracy, line_profile,
                    mean_image, nps_estimate)
from .core import DataError, Image, Roi, read_image, write_image
from .denoise import (AugmentConfig, LossConfig, PreprocessConfig, TrainConfig, cnn3_denoise, cnn3_train,
                      make_patch_set)
from .metrics import DEFAULT_DATA_RANGE, psnr, ssim
from .phantom import PhantomSpec, make_contrast_phantom, make_random_phantom, make_water_cylinder
from .scanner import ScanSetup, make_noise_ensemble, noiseless_sinogram, scan

PSNR_TIE_DB = 0.01
HU_SCALE = 25.0
NPS_ROI = 128
TUNING_EPOCHS = 5


# ---------------------------------------------------------------- greedy search

@dataclass(frozen=True)
class ExperimentStage:
    """One stage of the search: a label and at least two config deltas."""

    name: str
    candidates: tuple

    def __post_init__(self):
        cands = tuple(dict(c) for c in self.candidates)
        if len(cands) < 2:
            raise DataError(f"stage {self.name!r} needs at least 2 candidates, got {len(cands)}")
        object.__setattr__(self, "candidates", cands)

    @property
    def fields(self) -> set:
        return set().union(*(c.keys() for c in self.candidates))

    def to_dict(self) -> dict:
        return {"name": self.name, "candidates": [dict(c) for c in self.candidates]}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentStage":
        try:
            return cls(str(d["name"]), tuple(d["candidates"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed stage definition: {exc!r}") from None


def load_stages(path) -> list[ExperimentStage]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read stages {path}: {exc.strerror}") from None
    except ValueError:
        raise DataError(f"stages file {path} is not valid JSON") from None
    if isinstance(raw, dict):
        raw = raw.get("stages", [])
    return [ExperimentStage.from_dict(s) for s in raw]


class Objective:
    """Turns a configuration into a metrics dict carrying at least ``score``."""

    name = "score"

    def evaluate(self, config: dict) -> dict:
        raise NotImplementedError

    def better(self, a: dict, b: dict) -> bool:
        return a["score"] > b["score"]


class FunctionObjective(Objective):
    def __init__(self, fn: Callable[[dict], float]):
        self.fn = fn

    def evaluate(self, config):
        return {"score": float(self.fn(config))}


@dataclass
class StageTable:
    name: str
    rows: list
    winner: int | None

    def to_dict(self) -> dict:
        return {"name": self.name, "winner": self.winner, "rows": self.rows}


@dataclass
class TuneResult:
    config: dict
    tables: list
    evaluations: int


def greedy_tune(stages, objective: Objective, base: dict | None = None,
                threads: int = 1, on_result=None) -> TuneResult:
    """Evaluate each stage's candidates with earlier winners fixed; forward the best.

    A candidate whose evaluation raises is recorded as failed and skipped.
    ``on_result(stage_index, candidate_index, row)`` is called as rows arrive.
    """
    stages = list(stages)
    if not stages:
        raise DataError("greedy tuning needs at least one stage")
    seen: set = set()
    for st in stages:
        overlap = seen & st.fields
        if overlap:
            raise DataError(f"stage {st.name!r} revisits fields {sorted(overlap)}")
        seen |= st.fields
    config = dict(base or {})
    tables, evaluations = [], 0
    for si, stage in enumerate(stages):
        configs = [{**config, **delta} for delta in stage.candidates]

        def run(ci):
            try:
                return {"candidate": ci, "delta": stage.candidates[ci], "status": "ok",
                        **objective.evaluate(configs[ci])}
            except Exception as exc:  # recorded, not fatal
                return {"candidate": ci, "delta": stage.candidates[ci], "status": "failed",
                        "error": f"{type(exc).__name__}: {exc}"}

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(pool.map(run, range(len(configs))))
        else:
            rows = [run(ci) for ci in range(len(configs))]
        evaluations += len(rows)
        best = None
        for row in rows:
            if on_result is not None:
                on_result(si, row["candidate"], row)
            if row["status"] != "ok":
                continue
            if best is None or objective.better(row, rows[best]):
                best = row["candidate"]
        tables.append(StageTable(stage.name, rows, best))
        if best is None:
            raise DataError(f"every candidate of stage {stage.name!r} failed")
        config = configs[best]
    return TuneResult(config, tables, evaluations)


# ---------------------------------------------------------------- global objective

@dataclass(frozen=True)
class GlobalScore:
    psnr: float
    ssim: float

    def beats(self, other: "GlobalScore") -> bool:
        """PSNR decides unless within 0.01 dB; then SSIM. An infinite PSNR wins outright."""
        a_inf, b_inf = math.isinf(self.psnr), math.isinf(other.psnr)
        if a_inf != b_inf:
            return a_inf
        if a_inf or abs(self.psnr - other.psnr) <= PSNR_TIE_DB:
            return self.ssim > other.ssim
        return self.psnr > other.psnr


def objective_global(outputs, targets, data_range: float = DEFAULT_DATA_RANGE) -> GlobalScore:
    """Mean PSNR and SSIM of denoised outputs against their references."""
    outputs, targets = list(outputs), list(targets)
    if not outputs:
        raise DataError("empty tuning set")
    if len(outputs) != len(targets):
        raise DataError(f"{len(outputs)} outputs for {len(targets)} targets")
    from .metrics import SsimConfig
    cfg = SsimConfig(data_range=data_range)
    ps = [psnr(o, t, data_range) for o, t in zip(outputs, targets)]
    ss = [ssim(o, t, cfg) for o, t in zip(outputs, targets)]
    return GlobalScore(float(np.mean(ps)), float(np.mean(ss)))


# ---------------------------------------------------------------- bench objective

@dataclass
class BenchReport:
    mtf: ContrastMtf
    nps: NpsResult
    hu: dict  # insert HU -> HuAccuracy
    psnr: float | None = None
    ssim: float | None = None
    nps_distance: float | None = None
    composite_score: float | None = None
    subscores: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    @property
    def mtf50_by_contrast(self) -> dict:
        return self.mtf.mtf50

    @property
    def nps_radial(self):
        return self.nps.curve()

    def to_dict(self) -> dict:
        f, v = self.nps_radial
        return {
            "mtf50_by_contrast": {str(k): v for k, v in self.mtf50_by_contrast.items()},
            "mtf_crossed": {str(k): c.crossed for k, c in self.mtf.curves.items()},
            "nps_radial": {"freq_lp_per_mm": f.tolist(), "nps_hu2_mm2": v.tolist()},
            "nps_variance": self.nps.integral(),
            "nps_distance": self.nps_distance,
            "hu": {str(k): h.to_dict() for k, h in self.hu.items()},
            "psnr": self.psnr, "ssim": self.ssim,
            "composite_score": self.composite_score, "subscores": self.subscores, "weights": self.weights,
        }


def _unit_area(freqs, values) -> np.ndarray:
    area = float(np.sum(values)) * float(freqs[1] - freqs[0]) if len(freqs) > 1 else float(np.sum(values))
    if area <= 0:
        return np.zeros_like(values)
    return values / area


def nps_curve_distance(model: NpsResult, baseline: NpsResult) -> float:
    """L2 distance between unit-area radial curves relative to the baseline curve's norm, capped at 1."""
    fm, vm = model.curve()
    fb, vb = baseline.curve()
    if fm.shape != fb.shape:
        raise DataError("NPS curves sampled on different frequency grids")
    a, b = _unit_area(fm, vm), _unit_area(fb, vb)
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        return 0.0 if not np.any(a) else 1.0
    return min(1.0, float(np.linalg.norm(a - b)) / nb)


DEFAULT_WEIGHTS = {"resolution": 1.0 / 3.0, "texture": 1.0 / 3.0, "hu": 1.0 / 3.0}


def bench_subscores(report: BenchReport, baseline: BenchReport, hu_scale: float = HU_SCALE) -> dict:
    ratios = []
    for hu, f_base in baseline.mtf50_by_contrast.items():
        f_model = report.mtf50_by_contrast.get(hu)
        if f_model is None:
            raise DataError(f"report lacks the {hu:g} HU MTF")
        ratios.append(min(1.0, f_model / f_base) if f_base > 0 else 1.0)
    resolution = float(np.mean(ratios))
    texture = 1.0 - nps_curve_distance(report.nps, baseline.nps)
    mad = float(np.mean([h.plateau_mad for h in report.hu.values()]))
    hu = max(0.0, 1.0 - mad / hu_scale)
    clip = lambda x: min(1.0, max(0.0, x))  # noqa: E731
    return {"resolution": clip(resolution), "texture": clip(texture), "hu": clip(hu)}


def objective_bench(report: BenchReport, baseline: BenchReport | None, ldct_psnr: float | None = None,
                    weights: dict | None = None, hu_scale: float = HU_SCALE) -> BenchReport:
    """Fill in subscores, NPS distance and the composite (weighted mean, floored by LDCT PSNR)."""
    if baseline is None:
        raise DataError("bench objective needs the FBP baseline report")
    weights = dict(weights or DEFAULT_WEIGHTS)
    total = sum(weights.values())
    if total <= 0 or any(w < 0 for w in weights.values()):
        raise DataError("subscore weights must be non-negative with a positive sum")
    subs = bench_subscores(report, baseline, hu_scale)
    composite = sum(weights[k] * subs[k] for k in subs) / total
    if ldct_psnr is not None and report.psnr is not None and report.psnr < ldct_psnr:
        composite = 0.0
    report.subscores = subs
    report.weights = weights
    report.nps_distance = nps_curve_distance(report.nps, baseline.nps)
    report.composite_score = float(min(1.0, max(0.0, composite)))
    return report


# ---------------------------------------------------------------- simulated ensembles

_SIM_CALLS = {"n": 0}
_SIM_LOCK = threading.Lock()
_MEMORY: dict = {}


def simulation_count() -> int:
    """Number of ensembles simulated (not loaded from cache) in this process."""
    return _SIM_CALLS["n"]


def cache_dir(explicit=None) -> Path | None:
    d = explicit if explicit is not None else os.environ.get("CTBENCH_CACHE_DIR")
    return Path(d) if d else None


def _ensemble_key(spec: PhantomSpec, setup: ScanSetup, n: int, dose: float, seed: int) -> str:
    blob = json.dumps({"spec": spec.to_dict(), "setup": setup.to_dict(), "n": n, "dose": dose, "seed": seed},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def _load_cached(path: Path, n: int):
    if not (path / "complete.json").exists():
        return None
    try:
        return [read_image(path / f"r{k:03d}.f32") for k in range(n)]
    except DataError:
        return None


def _store(path: Path, images) -> None:
    # write into a private directory, then rename: readers only see complete sets
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=path.name + ".tmp"))
    for k, img in enumerate(images):
        write_image(img, tmp / f"r{k:03d}.f32")
    (tmp / "complete.json").write_text(json.dumps({"n": len(images)}))
    try:
        os.replace(tmp, path)
    except OSError:  # another writer won the race; its copy is equivalent
        shutil.rmtree(tmp, ignore_errors=True)


def cached_ensemble(spec: PhantomSpec, setup: ScanSetup, n: int, dose: float, seed: int,
                    threads: int = 1, cache=None) -> list[Image]:
    """Noisy FBP reconstructions of ``spec``, memoised in memory and optionally on disk."""
    key = _ensemble_key(spec, setup, n, dose, seed)
    with _SIM_LOCK:
        hit = _MEMORY.get(key)
    if hit is not None:
        return hit
    root = cache_dir(cache)
    images = _load_cached(root / key, n) if root is not None else None
    if images is None:
        with _SIM_LOCK:
            _SIM_CALLS["n"] += 1
        images = make_noise_ensemble(spec, setup, n, dose, seed, threads=threads)
        if root is not None:
            _store(root / key, images)
    with _SIM_LOCK:
        _MEMORY[key] = images
    return images


def clear_memory_cache() -> None:
    with _SIM_LOCK:
        _MEMORY.clear()


@dataclass(frozen=True)
class BenchSetup:
    """What the bench suite simulates: quarter-dose contrast and water ensembles."""

    scan: ScanSetup = ScanSetup()
    dose_fraction: float = 0.25
    n_contrast: int = 50
    n_water: int = 50
    seed: int = 0
    nps_roi: int = NPS_ROI
    contrast: PhantomSpec = field(default_factory=make_contrast_phantom)
    water: PhantomSpec = field(default_factory=make_water_cylinder)

    def to_dict(self) -> dict:
        return {"scan": self.scan.to_dict(), "dose_fraction": self.dose_fraction, "n_contrast": self.n_contrast,
                "n_water": self.n_water, "seed": self.seed, "nps_roi": self.nps_roi,
                "contrast": self.contrast.to_dict(), "water": self.water.to_dict()}


def run_bench_suite(denoiser, bench: BenchSetup = BenchSetup(), threads: int = 1, cache=None) -> BenchReport:
    """Denoise the cached ensembles and measure MTF per contrast, NPS and HU accuracy.

    MTF and HU profiles are taken on the mean of the denoised contrast
    realizations, which keeps the low-contrast edges measurable while still
    reflecting how the denoiser treats noisy input.
    """
    contrast = cached_ensemble(bench.contrast, bench.scan, bench.n_contrast, bench.dose_fraction,
                               bench.seed, threads, cache)
    water = cached_ensemble(bench.water, bench.scan, bench.n_water, bench.dose_fraction,
                            bench.seed + 100_000, threads, cache)
    den_contrast = [denoiser(img) for img in contrast]
    den_water = [denoiser(img) for img in water]
    mean_c = mean_image(den_contrast)
    mtf = contrast_mtf(mean_c, bench.contrast)
    roi = Roi.centered(bench.scan.size, bench.scan.size, bench.nps_roi)
    nps = nps_estimate(den_water, roi)
    hu = {ins.hu: hu_accuracy(line_profile(mean_c, bench.contrast, i))
          for i, ins in enumerate(bench.contrast.inserts)}
    return BenchReport(mtf, nps, hu)


# ---------------------------------------------------------------- CNN3 candidates

DEFAULT_CNN3_CONFIG = {
    "normalization": "unity", "patch_size": 55, "patch_stride": None,
    "learning_rate": 1e-3, "minibatch": 128, "epochs": TUNING_EPOCHS, "seed": 0, "optimizer": "adam",
    "loss": "mse", "lam": 1e-7, "beta": 1e-4, "alpha": 0.84,
    "augment_scale": False, "augment_rotate_flip": False, "augment_dose_blend": False,
    "max_steps": None,
}


def resolve_config(config: dict) -> dict:
    unknown = set(config) - set(DEFAULT_CNN3_CONFIG)
    if unknown:
        raise DataError(f"unknown configuration fields {sorted(unknown)}")
    return {**DEFAULT_CNN3_CONFIG, **config}


def train_config(config: dict, pairs, progress=None):
    """Train CNN3 on (LD, ND) image pairs as described by a flat config dict."""
    c = resolve_config(config)
    pre = PreprocessConfig(normalization=c["normalization"], patch_size=int(c["patch_size"]),
                           patch_stride=int(c["patch_stride"] or c["patch_size"]),
                           augment=AugmentConfig(scale=bool(c["augment_scale"]),
                                                 rotate_flip=bool(c["augment_rotate_flip"]),
                                                 dose_blend=bool(c["augment_dose_blend"])),
                           allow_any_patch_size=True)
    patches = make_patch_set(pairs, pre, seed=int(c["seed"]))
    loss = LossConfig(kind=c["loss"], lam=float(c["lam"]), beta=float(c["beta"]), alpha=float(c["alpha"]),
                      data_range=pre.data_range)
    tc = TrainConfig(learning_rate=float(c["learning_rate"]), minibatch=int(c["minibatch"]),
                     epochs=int(c["epochs"]), seed=int(c["seed"]), optimizer=c["optimizer"])
    result = cnn3_train(patches, loss, tc, progress=progress, max_steps=c["max_steps"])
    w = result.weights
    w.normalization, w.lo, w.hi = pre.normalization, pre.lo, pre.hi
    w.extra = {"config": c}
    return result


def simulate_pairs(seeds, setup: ScanSetup = ScanSetup(), low_dose: float = 0.25,
                   body_radius_mm: float = 100.0) -> list[tuple[Image, Image]]:
    """(quarter-dose, full-dose) reconstructions of random phantoms, one per seed."""
    pairs = []
    for s in seeds:
        spec = make_random_phantom(int(s), body_radius_mm)
        sino = noiseless_sinogram(spec, setup)
        pairs.append((scan(spec, setup, low_dose, seed=2 * int(s) + 1, sino=sino),
                      scan(spec, setup, 1.0, seed=2 * int(s) + 2, sino=sino)))
    return pairs


@dataclass
class TuningContext:
    train_pairs: list
    tuning_pairs: list
    bench: BenchSetup | None = None
    baseline: BenchReport | None = None
    weights: dict | None = None
    threads: int = 1
    cache: str | None = None
    models: dict = field(default_factory=dict)

    @property
    def ldct_psnr(self) -> float:
        return objective_global([ld for ld, _ in self.tuning_pairs], [nd for _, nd in self.tuning_pairs]).psnr


class GlobalObjective(Objective):
    name = "global"

    def __init__(self, ctx: TuningContext):
        self.ctx = ctx

    def _train(self, config):
        # training is deterministic, so a config seen in an earlier stage is reused
        key = json.dumps(resolve_config(config), sort_keys=True)
        if key not in self.ctx.models:
            self.ctx.models[key] = train_config(config, self.ctx.train_pairs).weights
        return self.ctx.models[key]

    def _global(self, w):
        outs = [cnn3_denoise(ld, w) for ld, _ in self.ctx.tuning_pairs]
        return objective_global(outs, [nd for _, nd in self.ctx.tuning_pairs])

    def evaluate(self, config):
        g = self._global(self._train(config))
        return {"score": g.psnr, "psnr": g.psnr, "ssim": g.ssim}

    def better(self, a, b):
        return GlobalScore(a["psnr"], a["ssim"]).beats(GlobalScore(b["psnr"], b["ssim"]))


class BenchObjective(GlobalObjective):
    name = "bench"

    def __init__(self, ctx: TuningContext):
        super().__init__(ctx)
        if ctx.bench is None:
            ctx.bench = BenchSetup()
        if ctx.baseline is None:
            ctx.baseline = run_bench_suite(lambda img: img, ctx.bench, ctx.threads, ctx.cache)
            ctx.baseline.psnr = ctx.ldct_psnr
            objective_bench(ctx.baseline, ctx.baseline, None, ctx.weights)
        self._floor = ctx.ldct_psnr

    def evaluate(self, config):
        w = self._train(config)
        g = self._global(w)
        report = run_bench_suite(lambda img: cnn3_denoise(img, w), self.ctx.bench, self.ctx.threads, self.ctx.cache)
        report.psnr, report.ssim = g.psnr, g.ssim
        objective_bench(report, self.ctx.baseline, self._floor, self.ctx.weights)
        return {"score": report.composite_score, "psnr": g.psnr, "ssim": g.ssim, **report.subscores}

    def better(self, a, b):
        return a["score"] > b["score"]


def hu_table(hu: dict) -> dict:
    return {float(k): (v.to_dict() if isinstance(v, HuAccuracy) else v) for k, v in hu.items()}


def curve_rows(curve: MtfCurve):
    return list(zip(curve.freqs.tolist(), curve.values.tolist()))
