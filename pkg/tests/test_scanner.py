import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from ctbench.core import DataError, Image, Roi, extract_roi
from ctbench.metrics import psnr, rmse
from ctbench.phantom import make_contrast_phantom, make_water_cylinder, rasterize
from ctbench.scanner import (ScanGeometry, ScanSetup, Sinogram, add_poisson_noise, fbp, forward_project, hu_to_mu,
                             make_noise_ensemble, mu_to_hu, noiseless_sinogram, ramp_filter, read_sinogram, scan,
                             write_sinogram)

WATER_SMALL = make_water_cylinder(25.0)


def test_hu_to_mu_examples():
    assert hu_to_mu(np.array([0.0]))[0] == pytest.approx(0.019)
    assert hu_to_mu(np.array([-1000.0]))[0] == 0.0
    assert hu_to_mu(np.array([-1500.0]))[0] == 0.0
    assert hu_to_mu(np.array([900.0]), 0.019)[0] == pytest.approx(0.0361)
    assert mu_to_hu(hu_to_mu(np.array([123.0])))[0] == pytest.approx(123.0)


def test_geometry_validation():
    with pytest.raises(DataError):
        ScanGeometry(n_views=0)
    with pytest.raises(DataError):
        ScanGeometry(i0=0.0)
    with pytest.raises(DataError):
        ScanGeometry(kernel="soft")
    g = ScanGeometry()
    assert g.covers(100.0 + 0.5) and not ScanGeometry(n_detectors=100).covers(100.0)


def test_projection_requires_coverage(small_setup):
    mu = hu_to_mu(rasterize(WATER_SMALL, 128, 128, 0.5, 2))
    with pytest.raises(DataError, match="does not cover"):
        forward_project(mu, ScanGeometry(n_views=10, n_detectors=50))
    assert forward_project(np.zeros((128, 128)), small_setup.geometry).data.max() == 0.0


def test_sinogram_non_negative_and_finite(small_setup):
    sino = noiseless_sinogram(make_contrast_phantom(25.0), small_setup)
    assert np.isfinite(sino.data).all() and sino.data.min() >= 0.0


def test_central_chord_of_water_cylinder():
    setup = ScanSetup()
    sino = noiseless_sinogram(make_water_cylinder(), setup)
    centre = setup.geometry.n_detectors // 2
    assert sino.data[:, centre] == pytest.approx(2 * 100.0 * 0.019, rel=0.005)


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_projection_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    g = ScanGeometry(n_views=12, n_detectors=64)
    m1, m2 = rng.random((32, 32)), rng.random((32, 32))
    lhs = forward_project(a * m1 + b * m2, g).data
    rhs = a * forward_project(m1, g).data + b * forward_project(m2, g).data
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_poisson_noise_is_seeded():
    g = ScanGeometry(n_views=20, n_detectors=30)
    sino = Sinogram(np.full((20, 30), 2.0), 0.4)
    a = add_poisson_noise(sino, g, 0.25, seed=3)
    b = add_poisson_noise(sino, g, 0.25, seed=3)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, add_poisson_noise(sino, g, 0.25, seed=4).data)
    with pytest.raises(DataError):
        add_poisson_noise(sino, g, 0.0, 1)
    with pytest.raises(DataError):
        add_poisson_noise(sino, g, 1.5, 1)


def test_quarter_dose_budget():
    # with p=0 the counts are Poisson(i0/4); mean recovered from p' = -ln(N/budget)
    g = ScanGeometry(n_views=100, n_detectors=100, i0=1e5)
    noisy = add_poisson_noise(Sinogram(np.zeros((100, 100)), 0.4), g, 0.25, seed=0)
    counts = 0.25 * 1e5 * np.exp(-noisy.data)
    assert counts.mean() == pytest.approx(0.25e5, rel=1e-3)


def test_large_photon_limit():
    g = ScanGeometry(n_views=100, n_detectors=100, i0=1e9)
    p = np.random.default_rng(0).uniform(0.05, 0.5, (100, 100))
    noisy = add_poisson_noise(Sinogram(p, 0.4), g, 1.0, seed=1)
    rel = noisy.data / p - 1.0
    assert abs(rel.mean()) < 1e-3
    assert np.sqrt(np.mean(rel ** 2)) < 1e-3


def test_zero_counts_are_floored():
    g = ScanGeometry(n_views=2, n_detectors=2, i0=10.0)
    noisy = add_poisson_noise(Sinogram(np.full((2, 2), 50.0), 0.4), g, 0.1, seed=0)
    assert np.all(noisy.data == -math.log(1 / 1.0))


def test_ramp_filters():
    sharp = ramp_filter(729, 0.4, "sharp")
    smooth = ramp_filter(729, 0.4, "smooth")
    assert sharp.size == smooth.size == 2048
    assert np.all(smooth <= sharp + 1e-15)
    assert smooth[sharp.size // 2] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DataError):
        ramp_filter(10, 1.0, "soft")


def test_sinogram_io(tmp_path):
    sino = Sinogram(np.random.default_rng(0).random((3, 5)), 0.4)
    write_sinogram(sino, tmp_path / "s.f32")
    back = read_sinogram(tmp_path / "s.f32")
    assert back.n_views == 3 and back.n_detectors == 5 and back.detector_spacing_mm == 0.4
    assert np.array_equal(back.data, sino.data.astype(np.float32))


def test_fbp_errors(small_setup):
    sino = noiseless_sinogram(WATER_SMALL, small_setup)
    with pytest.raises(DataError):
        fbp(sino, ScanGeometry(n_views=10, n_detectors=200), 128, 128)
    with pytest.raises(DataError):
        fbp(sino, small_setup.geometry, 512, 512, 0.5)


@pytest.mark.slow
def test_noiseless_water_cylinder_default_geometry():
    img = scan(make_water_cylinder(), ScanSetup(), None)
    roi = extract_roi(img, Roi.centered(512, 512, 40))
    assert abs(roi.as_float64().mean()) <= 15.0


@pytest.mark.slow
def test_smooth_phantom_fidelity():
    g = ScanGeometry()
    truth = gaussian_filter(rasterize(make_contrast_phantom()).as_float64(), 1.5)
    rec = fbp(forward_project(hu_to_mu(truth), g), g)
    assert psnr(rec, Image(truth), 2000.0) > 35.0


def test_ensemble_is_seeded_and_thread_independent(small_setup):
    a = make_noise_ensemble(WATER_SMALL, small_setup, 4, 0.25, seed=11, threads=1)
    b = make_noise_ensemble(WATER_SMALL, small_setup, 4, 0.25, seed=11, threads=3)
    assert len(a) == 4
    assert all(x == y for x, y in zip(a, b))
    # realization k uses seed + k
    assert a[2] == scan(WATER_SMALL, small_setup, 0.25, seed=13)
    with pytest.raises(DataError):
        make_noise_ensemble(WATER_SMALL, small_setup, 1, 0.25, 0)


def test_ensemble_mean_converges(small_setup):
    clean = scan(WATER_SMALL, small_setup, None)
    ens = make_noise_ensemble(WATER_SMALL, small_setup, 50, 0.25, seed=0)
    mean = Image(np.mean([e.as_float64() for e in ens], axis=0))
    assert rmse(mean, clean) < rmse(ens[0], clean) / 5


def test_noise_decreases_with_dose(small_setup):
    roi = Roi.centered(128, 128, 40)
    sd = [extract_roi(scan(WATER_SMALL, small_setup, d, seed=5), roi).as_float64().std() for d in (0.25, 0.5, 1.0)]
    assert sd[0] > sd[1] > sd[2]
