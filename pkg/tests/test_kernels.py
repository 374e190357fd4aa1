import importlib
import math

import numpy as np
import pytest

from ctbench import _kernels_py, kernels

BACKENDS = [pytest.param(_kernels_py, id="python")]
try:
    _compiled = importlib.import_module("ctbench._kernels")
    BACKENDS.append(pytest.param(_compiled, id="cython"))
except ImportError:
    _compiled = None


def disk_map(impl, n, spacing, radius, mu):
    return mu * impl.disk_coverage(n, n, spacing, 0.0, 0.0, radius, 8)


@pytest.mark.parametrize("impl", BACKENDS)
def test_chord_lengths(impl):
    spacing, radius, mu = 0.25, 20.0, 0.02
    mu_map = disk_map(impl, 200, spacing, radius, mu)
    det = np.array([0.0, 5.0, 10.0, 15.0])
    sino = impl.project(mu_map, spacing, np.array([0.0, 0.7, math.pi / 2]), det, 0.5 * spacing)
    expected = 2 * mu * np.sqrt(radius ** 2 - det ** 2)
    assert np.all(np.abs(sino / expected[None, :] - 1.0) < 0.005)


@pytest.mark.parametrize("impl", BACKENDS)
def test_zero_map_projects_to_zero(impl):
    sino = impl.project(np.zeros((16, 16)), 1.0, np.linspace(0, 3, 5), np.linspace(-8, 8, 9), 0.5)
    assert not sino.any()


@pytest.mark.parametrize("impl", BACKENDS)
def test_coverage_area(impl):
    spacing, radius = 0.5, 13.3
    cov = impl.disk_coverage(96, 96, spacing, 1.1, -2.3, radius, 8)
    assert cov.min() >= 0.0 and cov.max() <= 1.0
    assert cov.sum() * spacing ** 2 == pytest.approx(math.pi * radius ** 2, rel=1e-4)


@pytest.mark.skipif(_compiled is None, reason="compiled kernels not built")
def test_backends_agree():
    rng = np.random.default_rng(0)
    mu = rng.random((48, 40))
    angles = np.linspace(0, math.pi, 17, endpoint=False)
    det = (np.arange(70) - 34.5) * 0.7
    a = _kernels_py.project(mu, 0.5, angles, det, 0.25)
    b = _compiled.project(mu, 0.5, angles, det, 0.25)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
    q = rng.normal(size=(17, 70))
    a = _kernels_py.backproject(q, angles, float(det[0]), 0.7, 40, 48, 0.5)
    b = _compiled.backproject(q, angles, float(det[0]), 0.7, 40, 48, 0.5)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
    a = _kernels_py.disk_coverage(64, 64, 0.5, 1.3, 2.1, 9.7, 8)
    b = _compiled.disk_coverage(64, 64, 0.5, 1.3, 2.1, 9.7, 8)
    assert np.allclose(a, b, atol=1e-12)


def test_backend_flag():
    assert kernels.BACKEND in ("cython", "python")
