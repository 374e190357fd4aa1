"""``ctbench`` command line: simulation, training, denoising, bench tests, tuning, reports.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command that writes files also writes a manifest recording the exact
argument vector, the resolved configuration and the outputs; ``ctbench
replay`` re-runs a manifest.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (abs_diff, body_profile, contrast_mtf, hu_accuracy, line_profile, nps_estimate)
from .core import (DIFFERENCE_WINDOW, DataError, NumericalError, Roi, export_windowed_png, json_safe, read_image,
                   write_image)
from .denoise import apply_denoiser, describe, make_denoiser
from .kernels import BACKEND
from .metrics import DEFAULT_DATA_RANGE, all_metrics
from .phantom import (CONTRAST_LEVELS_HU, load_phantom, make_contrast_phantom, make_random_phantom,
                      make_water_cylinder, save_phantom)
from .report import (emit_report, hu_label, write_csv, write_mtf_csv, write_nps_csv, write_profile_csv)
from .scanner import (ScanGeometry, ScanSetup, add_poisson_noise, make_noise_ensemble, noiseless_sinogram,
                      reconstruct, write_sinogram)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers

def _setup(args) -> ScanSetup:
    geom = ScanGeometry(n_views=args.views, n_detectors=args.detectors, detector_spacing_mm=args.det_spacing,
                        i0=args.i0, kernel=args.kernel)
    if args.size < 8 or not args.spacing > 0 or not 1 <= args.supersample <= 16:
        raise DataError("size must be >= 8, spacing positive and supersample in 1..16")
    return ScanSetup(geometry=geom, size=args.size, spacing_mm=args.spacing, supersample=args.supersample,
                     mu_water=args.mu_water)


def _add_scan_flags(p):
    g = p.add_argument_group("scanner")
    g.add_argument("--size", type=int, default=512, help="image width/height in pixels")
    g.add_argument("--spacing", type=float, default=0.5, help="pixel spacing in mm")
    g.add_argument("--supersample", type=int, default=8)
    g.add_argument("--views", type=int, default=720)
    g.add_argument("--detectors", type=int, default=729)
    g.add_argument("--det-spacing", type=float, default=0.4)
    g.add_argument("--i0", type=float, default=1e5, help="unattenuated photons per detector at full dose")
    g.add_argument("--kernel", choices=("sharp", "smooth"), default="sharp")
    g.add_argument("--mu-water", type=float, default=0.019)


def _images_in(directory) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    files = sorted(directory.glob("*.f32"))
    if not files:
        raise DataError(f"no .f32 images in {directory}")
    return {f.stem: read_image(f) for f in files}


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _denoiser_from_args(args):
    chosen = [k for k in ("model", "gaussian", "tv", "external") if getattr(args, k, None) is not None]
    if getattr(args, "identity", False):
        chosen.append("identity")
    if len(chosen) > 1:
        raise UsageError(f"choose one denoiser, got {', '.join(chosen)}")
    if not chosen or chosen == ["identity"]:
        return "identity", {}
    k = chosen[0]
    if k == "model":
        return "cnn3", {"weights": str(Path(args.model).resolve())}
    if k == "gaussian":
        return "gaussian", {"sigma_px": args.gaussian}
    if k == "tv":
        return "tv", {"lam": args.tv, "iterations": args.tv_iterations}
    return "external", {"directory": str(Path(args.external).resolve())}


def _add_denoiser_flags(p):
    g = p.add_argument_group("denoiser (default: identity)")
    g.add_argument("--model", help="CNN3 weights file")
    g.add_argument("--gaussian", type=float, metavar="SIGMA_PX")
    g.add_argument("--tv", type=float, metavar="LAMBDA_HU")
    g.add_argument("--tv-iterations", type=int, default=100)
    g.add_argument("--external", metavar="DIR", help="directory of pre-denoised images matched by name")
    g.add_argument("--identity", action="store_true")


def _require_seed(args):
    if args.seed is None:
        raise UsageError(f"{args.command}: --seed is required for randomized commands")


# ---------------------------------------------------------------- commands

def cmd_phantom(args):
    if args.kind == "contrast":
        levels = [float(v) for v in args.levels.split(",")] if args.levels else CONTRAST_LEVELS_HU
        spec = make_contrast_phantom(args.radius, levels)
    elif args.kind == "water":
        spec = make_water_cylinder(args.radius)
    else:
        _require_seed(args)
        spec = make_random_phantom(args.seed, args.radius)
    out = save_phantom(spec, args.out)
    return {"outputs": [out], "config": {"kind": args.kind, "radius_mm": args.radius, "spec": spec.to_dict()}}


def cmd_scan(args):
    if args.dose is not None and not args.noiseless:
        _require_seed(args)
    spec = load_phantom(args.phantom)
    setup = _setup(args)
    out = _out_dir(args.out)
    sino = noiseless_sinogram(spec, setup)
    if not args.noiseless:
        sino = add_poisson_noise(sino, setup.geometry, args.dose, args.seed)
    img = reconstruct(sino, setup)
    outputs = [write_image(img, out / "image.f32")]
    if args.save_sinogram:
        outputs.append(write_sinogram(sino, out / "sinogram.f32"))
    return {"outputs": outputs, "inputs": [args.phantom],
            "config": {"setup": setup.to_dict(), "dose_fraction": None if args.noiseless else args.dose}}


def cmd_ensemble(args):
    _require_seed(args)
    spec = load_phantom(args.phantom)
    setup = _setup(args)
    out = _out_dir(args.out)
    images = make_noise_ensemble(spec, setup, args.n, args.dose, args.seed, threads=args.threads)
    outputs = [write_image(img, out / f"r{k:03d}.f32") for k, img in enumerate(images)]
    return {"outputs": outputs, "inputs": [args.phantom],
            "config": {"setup": setup.to_dict(), "n": args.n, "dose_fraction": args.dose}}


def cmd_pairs(args):
    from .harness import simulate_pairs

    _require_seed(args)
    setup = _setup(args)
    out = _out_dir(args.out)
    seeds = [args.seed + k for k in range(args.n)]
    pairs = simulate_pairs(seeds, setup, args.dose, args.radius)
    entries, outputs = [], []
    for s, (ld, nd) in zip(seeds, pairs):
        outputs += [write_image(ld, out / f"ld_{s:05d}.f32"), write_image(nd, out / f"nd_{s:05d}.f32")]
        entries.append({"ld": f"ld_{s:05d}.f32", "nd": f"nd_{s:05d}.f32"})
    (out / "pairs.json").write_text(json.dumps(entries, indent=1))
    outputs.append(out / "pairs.json")
    return {"outputs": outputs, "config": {"setup": setup.to_dict(), "n": args.n, "low_dose": args.dose,
                                           "radius_mm": args.radius, "phantom_seeds": seeds}}


def _train_config_from_args(args) -> dict:
    augment = {a.strip() for a in (args.augment or "").split(",") if a.strip()}
    bad = augment - {"scale", "rotate_flip", "dose_blend"}
    if bad:
        raise UsageError(f"unknown augmentation {sorted(bad)}")
    return {"normalization": args.normalization, "patch_size": args.patch, "patch_stride": args.stride,
            "learning_rate": args.lr, "minibatch": args.minibatch, "epochs": args.epochs, "seed": args.seed,
            "optimizer": args.optimizer, "loss": args.loss, "lam": args.lam, "beta": args.beta,
            "alpha": args.alpha, "augment_scale": "scale" in augment,
            "augment_rotate_flip": "rotate_flip" in augment, "augment_dose_blend": "dose_blend" in augment,
            "max_steps": args.max_steps}


def cmd_train(args):
    from .denoise import load_training_manifest, save_weights
    from .harness import resolve_config, train_config

    _require_seed(args)
    pairs = load_training_manifest(args.data)
    config = resolve_config(_train_config_from_args(args))
    out = _out_dir(args.out)
    progress = (lambda e, v: print(f"epoch {e}: loss {v:.6g}", file=sys.stderr)) if args.verbose else None
    result = train_config(config, pairs, progress)
    w = save_weights(result.weights, out / "cnn3.w")
    trace = write_csv(out / "trace.csv", ("epoch", "loss"),
                      [(k + 1, v) for k, v in enumerate(result.loss_trace)])
    return {"outputs": [w, trace], "inputs": [args.data],
            "config": {**config, "steps": result.steps, "weight_digests": result.weight_digests}}


def cmd_denoise(args):
    kind, params = _denoiser_from_args(args)
    inputs = _images_in(args.input)
    out = _out_dir(args.out)
    results = apply_denoiser(kind, inputs, **params)
    outputs = [write_image(img, out / f"{name}.f32") for name, img in results.items()]
    return {"outputs": outputs, "inputs": [args.input], "config": {"denoiser": describe(kind, **params)}}


def cmd_metrics(args):
    a, b = read_image(args.a), read_image(args.b)
    m = all_metrics(a, b, args.data_range)
    text = json.dumps(json_safe(m), indent=1, sort_keys=True)
    print(text)
    if args.out:
        out = _out_dir(args.out)
        (out / "metrics.json").write_text(text)
        return {"outputs": [out / "metrics.json"], "inputs": [args.a, args.b], "config": {"data_range": args.data_range}}
    return None


def _bench_mtf(args, out):
    img = read_image(args.image)
    spec = load_phantom(args.phantom)
    mtf = contrast_mtf(img, spec)
    outputs = [write_mtf_csv(c, out / f"mtf_{hu_label(hu)}.csv") for hu, c in mtf.curves.items()]
    (out / "mtf50.json").write_text(json.dumps({f"{hu:g}": c.mtf50 for hu, c in mtf.curves.items()}, indent=1))
    return {"outputs": outputs + [out / "mtf50.json"], "inputs": [args.image, args.phantom],
            "config": {"crossed": {f"{hu:g}": c.crossed for hu, c in mtf.curves.items()}}}


def _bench_nps(args, out):
    images = list(_images_in(args.input).values())
    size = args.roi
    roi = Roi.centered(images[0].width, images[0].height, size)
    nps = nps_estimate(images, roi, args.detrend)
    outputs = [write_nps_csv(nps, out / "nps.csv"),
               write_raw_nps(nps, out / "nps2d.f32")]
    return {"outputs": outputs, "inputs": [args.input],
            "config": {"roi": [roi.x0, roi.y0, roi.w, roi.h], "detrend": args.detrend,
                       "n_realizations": len(images), "variance_hu2": nps.integral()}}


def write_raw_nps(nps, path):
    from .core import Image
    return write_image(Image(nps.nps2d, 1.0 / (nps.roi_size[1] * nps.pixel_spacing_mm)), path)


def _bench_hu(args, out):
    img = read_image(args.image)
    spec = load_phantom(args.phantom)
    prof = body_profile(img, spec, args.axis) if args.insert < 0 else line_profile(img, spec, args.insert, args.axis)
    acc = hu_accuracy(prof)
    write_profile_csv(prof, out / "profile.csv")
    (out / "hu.json").write_text(json.dumps(acc.to_dict(), indent=1))
    return {"outputs": [out / "profile.csv", out / "hu.json"], "inputs": [args.image, args.phantom],
            "config": {"insert": args.insert, "axis": args.axis}}


def _diff(args, out):
    d = abs_diff(read_image(args.a), read_image(args.b))
    return {"outputs": [write_image(d, out / "diff.f32"), export_windowed_png(d, DIFFERENCE_WINDOW, out / "diff.png")],
            "inputs": [args.a, args.b], "config": {"window_hu": [0.0, 122.0]}}


def _bench_suite(args, out):
    from .harness import BenchSetup, objective_bench, run_bench_suite

    _require_seed(args)
    setup = _setup(args)
    bench = BenchSetup(scan=setup, dose_fraction=args.dose, n_contrast=args.n_contrast, n_water=args.n_water,
                       seed=args.seed, nps_roi=args.roi, contrast=make_contrast_phantom(args.radius),
                       water=make_water_cylinder(args.radius))
    kind, params = _denoiser_from_args(args)
    den = make_denoiser(kind, **params)
    baseline = run_bench_suite(lambda img: img, bench, args.threads)
    objective_bench(baseline, baseline)
    report = run_bench_suite(den, bench, args.threads)
    objective_bench(report, baseline)
    outputs = []
    for hu, c in report.mtf.curves.items():
        outputs.append(write_mtf_csv(c, out / f"mtf_{hu_label(hu)}.csv"))
        outputs.append(write_mtf_csv(baseline.mtf.curves[hu], out / f"mtf_fbp_{hu_label(hu)}.csv"))
    outputs += [write_nps_csv(report.nps, out / "nps.csv"), write_nps_csv(baseline.nps, out / "nps_fbp.csv"),
                write_raw_nps(report.nps, out / "nps2d.f32")]
    (out / "mtf50.json").write_text(json.dumps({f"{hu:g}": v for hu, v in report.mtf50_by_contrast.items()}, indent=1))
    (out / "report.json").write_text(json.dumps(json_safe(report.to_dict()), indent=1))
    (out / "baseline.json").write_text(json.dumps(json_safe(baseline.to_dict()), indent=1))
    outputs += [out / "mtf50.json", out / "report.json", out / "baseline.json"]
    return {"outputs": outputs, "config": {"bench": bench.to_dict(), "denoiser": describe(kind, **params)}}


def cmd_bench(args):
    out = _out_dir(args.out)
    handler = {"mtf": _bench_mtf, "nps": _bench_nps, "hu": _bench_hu, "diff": _diff, "suite": _bench_suite}
    result = handler[args.test](args, out)
    result["command"] = f"bench-{args.test}"
    return result


def cmd_diff(args):
    return _diff(args, _out_dir(args.out))


def cmd_tune(args):
    from .denoise import load_training_manifest, save_weights
    from .harness import (BenchObjective, BenchSetup, GlobalObjective, TuningContext, greedy_tune, load_stages,
                          resolve_config)

    _require_seed(args)
    stages = load_stages(args.stages)
    pairs = load_training_manifest(args.data)
    if args.tuning_data:
        tuning = load_training_manifest(args.tuning_data)
    else:
        if len(pairs) < 2:
            raise DataError("need at least 2 pairs to hold out a tuning set")
        k = max(1, len(pairs) // 5)
        pairs, tuning = pairs[:-k], pairs[-k:]
    base = resolve_config({"seed": args.seed, "epochs": args.epochs, "max_steps": args.max_steps})
    out = _out_dir(args.out)
    ctx = TuningContext(pairs, tuning, threads=args.threads)
    if args.paradigm == "bench":
        setup = _setup(args)
        ctx.bench = BenchSetup(scan=setup, n_contrast=args.n_contrast, n_water=args.n_water, seed=args.seed,
                               nps_roi=args.roi, contrast=make_contrast_phantom(args.radius),
                               water=make_water_cylinder(args.radius))
        objective = BenchObjective(ctx)
    else:
        objective = GlobalObjective(ctx)
    (out / "stages.json").write_text(json.dumps([s.to_dict() for s in stages], indent=1))
    result = greedy_tune(stages, objective, base)
    outputs = [out / "stages.json"]
    for si, table in enumerate(result.tables):
        sd = _out_dir(out / f"stage_{si}")
        rows = []
        for row in table.rows:
            rows.append((row["candidate"], json.dumps(row["delta"], sort_keys=True), row.get("psnr", ""),
                         row.get("ssim", ""), row.get("score", "") if args.paradigm == "bench" else "",
                         row.get("resolution", ""), row.get("texture", ""), row.get("hu", ""), row["status"]))
        outputs.append(write_csv(sd / "table.csv", ("candidate", "delta", "psnr", "ssim", "composite",
                                                    "resolution", "texture", "hu", "status"), rows))
        tj = table.to_dict()
        for row in tj["rows"]:
            if args.paradigm == "bench" and "score" in row:
                row["composite"] = row["score"]
        (sd / "table.json").write_text(json.dumps(json_safe(tj), indent=1, sort_keys=True))
        outputs.append(sd / "table.json")
        for ci, delta in enumerate(stages[si].candidates):
            key = json.dumps(resolve_config({**_stage_config(result, stages, si, base), **delta}), sort_keys=True)
            w = ctx.models.get(key)
            if w is not None:
                outputs.append(save_weights(w, sd / f"candidate_{ci}.w"))
    (out / "winner.json").write_text(json.dumps(result.config, indent=1, sort_keys=True))
    outputs.append(out / "winner.json")
    return {"outputs": outputs, "inputs": [args.stages, args.data],
            "config": {"paradigm": args.paradigm, "base": base, "evaluations": result.evaluations}}


def _stage_config(result, stages, si, base):
    config = dict(base)
    for k in range(si):
        config.update(stages[k].candidates[result.tables[k].winner])
    return config


def cmd_report(args):
    written = emit_report(args.run)
    for p in written:
        print(p)
    return None


def cmd_replay(args):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["argv"])
    if args.out is not None:
        if "--out" not in argv:
            raise DataError("manifest command has no --out to redirect")
        argv[argv.index("--out") + 1] = str(Path(args.out).resolve())
    with _cwd(manifest.get("cwd", ".")):
        return main(argv)


@contextmanager
def _cwd(path):
    prev = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(prev)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctbench", description="CT image-quality bench testing for low-dose denoisers")
    p.add_argument("--version", action="version", version=f"ctbench {__version__}")
    p.add_argument("--threads", type=int, default=1, help="worker cap for ensemble simulation")
    p.add_argument("--deterministic", action="store_true", help="force order-fixed reductions (serial workers)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("phantom", help="write a phantom description")
    s.add_argument("kind", choices=("contrast", "water", "random"))
    s.add_argument("--out", required=True)
    s.add_argument("--radius", type=float, default=100.0, help="body radius in mm")
    s.add_argument("--levels", help="comma-separated insert HU values (contrast phantom)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("scan", help="simulate one scan and reconstruct it")
    s.add_argument("--phantom", required=True)
    s.add_argument("--dose", type=float, default=1.0, help="dose fraction of the full-dose photon budget")
    s.add_argument("--noiseless", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--save-sinogram", action="store_true")
    s.add_argument("--out", required=True)
    _add_scan_flags(s)
    s.set_defaults(func=cmd_scan)

    s = sub.add_parser("ensemble", help="independent noisy reconstructions of one phantom")
    s.add_argument("--phantom", required=True)
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--dose", type=float, default=0.25)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    _add_scan_flags(s)
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("pairs", help="simulate low-dose/full-dose training pairs of random phantoms")
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--dose", type=float, default=0.25)
    s.add_argument("--radius", type=float, default=100.0)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    _add_scan_flags(s)
    s.set_defaults(func=cmd_pairs)

    s = sub.add_parser("train", help="train the CNN3 denoiser")
    s.add_argument("--data", required=True, help="JSON list of {ld, nd} image pairs")
    s.add_argument("--loss", default="mse",
                   help="mse, msel1 (L1 prior), mae, msetv (TV prior), msewd (weight decay), msssiml1")
    s.add_argument("--lambda", dest="lam", type=float, default=1e-7)
    s.add_argument("--beta", type=float, default=1e-4)
    s.add_argument("--alpha", type=float, default=0.84)
    s.add_argument("--patch", type=int, default=55)
    s.add_argument("--stride", type=int)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--minibatch", type=int, default=128)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--optimizer", choices=("adam", "sgd_momentum"), default="adam")
    s.add_argument("--normalization", choices=("unity", "normF"), default="unity")
    s.add_argument("--augment", help="comma list of scale, rotate_flip, dose_blend")
    s.add_argument("--seed", type=int)
    s.add_argument("--verbose", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="apply a denoiser to every image in a directory")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    _add_denoiser_flags(s)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("metrics", help="RMSE, PSNR, SSIM, MS-SSIM of two images")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True, help="reference image")
    s.add_argument("--data-range", type=float, default=DEFAULT_DATA_RANGE)
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("bench", help="bench tests: mtf, nps, hu, diff, suite")
    s.add_argument("test", choices=("mtf", "nps", "hu", "diff", "suite"))
    s.add_argument("--out", required=True)
    s.add_argument("--image")
    s.add_argument("--phantom")
    s.add_argument("--in", dest="input", help="directory of noise realizations (nps)")
    s.add_argument("--roi", type=int, default=128)
    s.add_argument("--detrend", choices=("none", "mean", "plane"), default="mean")
    s.add_argument("--insert", type=int, default=1, help="insert index; -1 profiles the body")
    s.add_argument("--axis", choices=("horizontal", "vertical"), default="horizontal")
    s.add_argument("--a")
    s.add_argument("--b")
    s.add_argument("--seed", type=int)
    s.add_argument("--dose", type=float, default=0.25)
    s.add_argument("--n-contrast", type=int, default=50)
    s.add_argument("--n-water", type=int, default=50)
    s.add_argument("--radius", type=float, default=100.0)
    _add_scan_flags(s)
    _add_denoiser_flags(s)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("diff", help="absolute difference image, PNG windowed to [0, 122] HU")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_diff)

    s = sub.add_parser("tune", help="greedy stage-wise CNN3 hyperparameter search")
    s.add_argument("--paradigm", choices=("global", "bench"), default="global")
    s.add_argument("--stages", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--tuning-data")
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--n-contrast", type=int, default=50)
    s.add_argument("--n-water", type=int, default=50)
    s.add_argument("--roi", type=int, default=128)
    s.add_argument("--radius", type=float, default=100.0)
    _add_scan_flags(s)
    s.set_defaults(func=cmd_tune)

    s = sub.add_parser("report", help="plots and summary for a run directory")
    s.add_argument("run")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    s.add_argument("manifest")
    s.add_argument("--out", help="write to this directory instead of the recorded one")
    s.set_defaults(func=cmd_replay)
    return p


_BENCH_NEEDS = {"mtf": ("image", "phantom"), "nps": ("input",), "hu": ("image", "phantom"), "diff": ("a", "b"),
                "suite": ()}


def _manifest_path(args, result) -> Path:
    out = Path(args.out)
    if args.command == "phantom":
        return out.with_name(out.stem + ".manifest.json")
    return out / "manifest.json"


def _write_manifest(args, argv, result, elapsed):
    path = _manifest_path(args, result)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    config.update(result.get("config") or {})
    seeds = {k: v for k, v in config.items() if k == "seed"}
    manifest = {
        "command": result.get("command", args.command),
        "argv": list(argv),
        "cwd": os.getcwd(),
        "version": __version__,
        "backend": BACKEND,
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in result.get("inputs", [])],
        "outputs": [str(p) for p in result.get("outputs", [])],
        "wall_clock_s": elapsed,
    }
    path.write_text(json.dumps(json_safe(manifest), indent=1, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.deterministic:
            args.threads = 1
        if args.command == "bench":
            missing = [f"--{n}" if n != "input" else "--in" for n in _BENCH_NEEDS[args.test]
                       if getattr(args, n) is None]
            if missing:
                raise UsageError(f"bench {args.test}: missing required {', '.join(missing)}")
        start = time.perf_counter()
        result = args.func(args)
        if result is not None and args.command != "replay":
            _write_manifest(args, argv, result, time.perf_counter() - start)
        return result if isinstance(result, int) else EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ctbench: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"ctbench: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
