"""Time the compiled kernels against their numpy twins on the default scanner geometry.

    python3 benchmarks/bench_kernels.py [--repeat 3]
"""

import argparse
import timeit

import numpy as np

from ctbench import _kernels_py
from ctbench.scanner import ScanGeometry

try:
    from ctbench import _kernels
except ImportError:
    _kernels = None


def cases(geom, size, spacing):
    mu = np.ascontiguousarray(np.random.default_rng(0).uniform(0, 0.02, (size, size)))
    q = np.ascontiguousarray(np.random.default_rng(1).normal(size=(geom.n_views, geom.n_detectors)))
    det0 = float(geom.detector_positions[0])
    return {
        "project": lambda impl: impl.project(mu, spacing, geom.angles, geom.detector_positions, 0.5 * spacing),
        "backproject": lambda impl: impl.backproject(q, geom.angles, det0, geom.detector_spacing_mm,
                                                     size, size, spacing),
        "disk_coverage": lambda impl: impl.disk_coverage(size, size, spacing, 10.0, -5.0, 100.0, 8),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--size", type=int, default=512)
    args = ap.parse_args()
    geom = ScanGeometry()
    backends = {"python": _kernels_py}
    if _kernels is not None:
        backends["cython"] = _kernels
    print(f"{'kernel':<14}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if _kernels else ""))
    for name, fn in cases(geom, args.size, 0.5).items():
        best = {b: min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) for b, impl in backends.items()}
        row = f"{name:<14}" + "".join(f"{t:>11.3f}s" for t in best.values())
        if _kernels is not None:
            row += f"{best['python'] / best['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
