"""CSV writers and the human-readable report for a run directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .bench import LineProfile, MtfCurve, NpsResult
from .core import DIFFERENCE_WINDOW, DataError, export_windowed_png, read_image
from .plots import line_plot, log_image_png

MTF_HEADER = ("freq_lp_per_mm", "mtf")
NPS_HEADER = ("freq_lp_per_mm", "nps_hu2_mm2")
PROFILE_HEADER = ("pos_mm", "hu", "ref_hu")

# artifacts each command must leave behind for a report
REQUIRED = {
    "bench-mtf": ["mtf50.json"],
    "bench-nps": ["nps.csv", "nps2d.f32"],
    "bench-hu": ["profile.csv", "hu.json"],
    "bench-diff": ["diff.f32"],
    "diff": ["diff.f32"],
    "bench-suite": ["report.json", "baseline.json", "nps.csv", "nps_fbp.csv", "nps2d.f32", "mtf50.json"],
    "tune": ["stages.json", "winner.json"],
    "train": ["trace.csv", "cnn3.w"],
}


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path) -> tuple[list, np.ndarray]:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def write_mtf_csv(curve: MtfCurve, path) -> Path:
    return write_csv(path, MTF_HEADER, zip(curve.freqs, curve.values))


def write_nps_csv(nps: NpsResult, path) -> Path:
    f, v = nps.curve()
    return write_csv(path, NPS_HEADER, zip(f, v))


def write_profile_csv(profile: LineProfile, path) -> Path:
    return write_csv(path, PROFILE_HEADER, zip(profile.positions_mm, profile.values_hu, profile.reference_hu))


def hu_label(hu: float) -> str:
    return f"{hu:g}".replace("-", "m")


def _mtf_plots(run: Path, written: list):
    files = sorted(run.glob("mtf_*.csv"))
    model = [f for f in files if not f.name.startswith("mtf_fbp_")]
    if not model:
        return
    series = {}
    for f in model:
        tag = f.stem[len("mtf_"):]
        _, data = read_csv(f)
        series[f"{tag} HU"] = (data[:, 0], data[:, 1])
        base = run / f"mtf_fbp_{tag}.csv"
        if base.exists():
            _, b = read_csv(base)
            single = {f"{tag} HU": (data[:, 0], data[:, 1]), f"{tag} HU FBP": (b[:, 0], b[:, 1])}
            written.append(line_plot(single, run / f"mtf_{tag}.png", f"MTF {tag} HU", "lp/mm", "MTF"))
    written.append(line_plot(series, run / "mtf.png", "MTF per contrast", "lp/mm", "MTF"))


def _nps_plots(run: Path, written: list):
    if (run / "nps.csv").exists():
        _, d = read_csv(run / "nps.csv")
        series = {"denoised": (d[:, 0], d[:, 1])}
        if (run / "nps_fbp.csv").exists():
            _, b = read_csv(run / "nps_fbp.csv")
            series["FBP"] = (b[:, 0], b[:, 1])
        written.append(line_plot(series, run / "nps.png", "Radial NPS", "lp/mm", "HU^2 mm^2"))
    if (run / "nps2d.f32").exists():
        written.append(log_image_png(read_image(run / "nps2d.f32").as_float64(), run / "nps2d.png"))


def _profile_plots(run: Path, written: list):
    for f in sorted(run.glob("profile*.csv")):
        _, d = read_csv(f)
        written.append(line_plot({"measured": (d[:, 0], d[:, 1]), "truth": (d[:, 0], d[:, 2])},
                                 f.with_suffix(".png"), f.stem, "mm", "HU"))


def _diff_images(run: Path, written: list):
    for f in sorted(run.glob("diff*.f32")):
        written.append(export_windowed_png(read_image(f), DIFFERENCE_WINDOW, f.with_suffix(".png")))


def _fmt(v, spec=".4g"):
    return "-" if v is None else format(v, spec)


def _summary(run: Path, command: str) -> str:
    lines = [f"# ctbench report: {command}", ""]
    if command == "tune":
        winner = json.loads((run / "winner.json").read_text())
        stages = json.loads((run / "stages.json").read_text())
        lines += ["| stage | candidate | PSNR (dB) | SSIM | composite | status |", "|---|---|---|---|---|---|"]
        for k, st in enumerate(stages):
            table = run / f"stage_{k}" / "table.json"
            if not table.exists():
                continue
            t = json.loads(table.read_text())
            for row in t["rows"]:
                mark = " **(winner)**" if row["candidate"] == t["winner"] else ""
                lines.append(f"| {st['name']} | {json.dumps(row['delta'])}{mark} | {_fmt(row.get('psnr'), '.2f')} "
                             f"| {_fmt(row.get('ssim'), '.4f')} | {_fmt(row.get('composite'), '.3f')} "
                             f"| {row['status']} |")
        lines += ["", "Winning configuration:", "", "```json", json.dumps(winner, indent=2, sort_keys=True), "```"]
    if command == "bench-suite":
        rep = json.loads((run / "report.json").read_text())
        base = json.loads((run / "baseline.json").read_text())
        lines += ["| contrast (HU) | MTF50 (lp/mm) | FBP MTF50 | plateau bias | plateau MAD |",
                  "|---|---|---|---|---|"]
        for hu, f50 in rep["mtf50_by_contrast"].items():
            h = rep["hu"].get(hu, {})
            lines.append(f"| {hu} | {f50:.3f} | {base['mtf50_by_contrast'].get(hu, float('nan')):.3f} "
                         f"| {_fmt(h.get('plateau_bias'), '.2f')} | {_fmt(h.get('plateau_mad'), '.2f')} |")
        lines += ["", f"NPS variance: {rep['nps_variance']:.1f} HU^2 (FBP {base['nps_variance']:.1f})",
                  f"NPS curve distance: {_fmt(rep.get('nps_distance'), '.3f')}",
                  f"Composite score: {_fmt(rep.get('composite_score'), '.3f')} {rep.get('subscores', {})}"]
    if command == "bench-mtf":
        for hu, f50 in json.loads((run / "mtf50.json").read_text()).items():
            lines.append(f"- MTF50 at {hu} HU: {f50:.3f} lp/mm")
    if command in ("bench-hu",):
        lines.append("```json\n" + (run / "hu.json").read_text() + "\n```")
    if command == "train":
        _, trace = read_csv(run / "trace.csv")
        lines += ["| epoch | loss |", "|---|---|"] + [f"| {int(e)} | {v:.6g} |" for e, v in trace]
    return "\n".join(lines) + "\n"


def emit_report(run) -> list[Path]:
    """Render plots and ``summary.md`` for a run directory; returns the written paths."""
    run = Path(run)
    manifest = run / "manifest.json"
    if not manifest.exists():
        raise DataError(f"{run} has no manifest.json")
    command = json.loads(manifest.read_text()).get("command", "")
    missing = [name for name in REQUIRED.get(command, []) if not (run / name).exists()]
    if missing:
        raise DataError(f"incomplete run directory {run}: missing {', '.join(missing)}")
    written: list = []
    _mtf_plots(run, written)
    _nps_plots(run, written)
    _profile_plots(run, written)
    _diff_images(run, written)
    if (run / "trace.csv").exists():
        _, d = read_csv(run / "trace.csv")
        written.append(line_plot({"loss": (d[:, 0], d[:, 1])}, run / "loss.png", "Training loss",
                                 "epoch", "loss", logy=True))
    summary = run / "summary.md"
    summary.write_text(_summary(run, command))
    written.append(summary)
    return written
