import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import cnn3_input_jvp_error, cnn3_weight_errors, loss_pred_error
from ctbench.bench import body_profile, hu_accuracy, nps_estimate
from ctbench.core import DataError, Image, NumericalError, Roi, extract_roi, write_image
from ctbench.denoise import (LOSS_KINDS, AugmentConfig, Cnn3Weights, LossConfig, PatchSet, PreprocessConfig,
                             TrainConfig, apply_denoiser, cnn3_denoise, cnn3_forward, cnn3_train, denormalize,
                             describe, dose_blend, gaussian_denoise, gaussian_taps, load_training_manifest,
                             load_weights, loss_and_grad, make_denoiser, make_patch_set, normalize, save_weights,
                             tv_denoise)
from ctbench.phantom import make_water_cylinder, rasterize
from ctbench.scanner import ScanSetup, scan


# preprocessing

def test_normalize_examples():
    img = Image(np.array([[-1024.0, 3072.0, 0.0, -2000.0, 5000.0]]))
    u = normalize(img, "unity").data
    assert u[0, 0] == 0.0 and u[0, 1] == 1.0 and u[0, 3] == 0.0 and u[0, 4] == 1.0
    f = normalize(img, "normF").data
    assert f[0, 0] == 0.0 and f[0, 2] == 1024.0 and f[0, 3] == 0.0
    with pytest.raises(DataError):
        normalize(img, "unity", lo=5.0, hi=5.0)
    with pytest.raises(DataError):
        normalize(img, "zscore")


@settings(max_examples=30)
@given(st.lists(st.floats(-1024.0, 3072.0), min_size=1, max_size=20), st.sampled_from(["unity", "normF"]))
def test_normalize_round_trip(values, mode):
    img = Image(np.array([values]))
    back = denormalize(normalize(img, mode), mode)
    assert np.allclose(back.data, img.data, atol=1e-3)


@settings(max_examples=30)
@given(st.lists(st.floats(-3000.0, 5000.0), min_size=2, max_size=20))
def test_normalize_monotone_and_shift(values):
    v = np.sort(np.array(values, dtype=np.float32))
    u = normalize(Image(v[None, :]), "unity").data[0]
    assert np.all(np.diff(u) >= 0) and u.min() >= 0.0 and u.max() <= 1.0
    inside = v[v >= -1024.0]
    f = normalize(Image(np.atleast_2d(inside)), "normF").data if inside.size else np.zeros((1, 0))
    assert np.allclose(f, inside + 1024.0, atol=1e-3)


def test_dose_blend_examples():
    nd = Image(np.array([[0.0, 10.0]]))
    ld = Image(np.array([[4.0, -6.0]]))
    assert dose_blend(nd, ld, 1.0) == ld
    assert dose_blend(nd, ld, 0.0) == nd
    assert dose_blend(nd, ld, 0.5).data.tolist() == [[2.0, 2.0]]
    with pytest.raises(DataError):
        dose_blend(nd, Image(np.zeros((2, 2))), 0.5)


@settings(max_examples=30)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_dose_blend_affine_in_gamma(g1, g2):
    rng = np.random.default_rng(0)
    nd, ld = Image(rng.normal(0, 100, (4, 4))), Image(rng.normal(0, 100, (4, 4)))
    lhs = dose_blend(nd, ld, g1).as_float64() + dose_blend(nd, ld, g2).as_float64()
    assert np.allclose(lhs, 2 * dose_blend(nd, ld, 0.5 * (g1 + g2)).as_float64(), atol=1e-3)


def _pair(seed=0, size=64):
    rng = np.random.default_rng(seed)
    nd = rng.normal(0, 100, (size, size))
    return Image(nd + rng.normal(0, 30, nd.shape)), Image(nd)


def test_patch_grid_count():
    ps = make_patch_set([_pair()], PreprocessConfig(patch_size=32, patch_stride=32))
    assert len(ps) == 4 and ps.ld.shape == (4, 32, 32) and ps.ld.dtype == np.float32


def test_patch_config_validation():
    with pytest.raises(DataError):
        PreprocessConfig(patch_size=40)
    assert PreprocessConfig(patch_size=40, allow_any_patch_size=True).patch_size == 40
    with pytest.raises(DataError):
        PreprocessConfig(patch_stride=0)
    with pytest.raises(DataError):
        AugmentConfig(gamma_low=1.3, gamma_high=1.2)
    with pytest.raises(DataError):
        make_patch_set([_pair(size=20)], PreprocessConfig(patch_size=32))
    cfg = PreprocessConfig(normalization="normF", augment=AugmentConfig(scale=True))
    assert PreprocessConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("augment", [AugmentConfig(rotate_flip=True),
                                     AugmentConfig(rotate_flip=True, dose_blend=True, scale=True)])
def test_rotate_flip_doubles(augment):
    base = make_patch_set([_pair()], PreprocessConfig(patch_size=32, patch_stride=16,
                                                       augment=AugmentConfig(scale=augment.scale,
                                                                             dose_blend=augment.dose_blend)))
    aug = make_patch_set([_pair()], PreprocessConfig(patch_size=32, patch_stride=16, augment=augment))
    assert len(aug) == 2 * len(base)


def test_patches_share_transforms():
    ld = np.zeros((64, 64))
    nd = np.zeros((64, 64))
    ld[5, 9] = nd[5, 9] = 1000.0
    cfg = PreprocessConfig(patch_size=32, patch_stride=32,
                           augment=AugmentConfig(rotate_flip=True, dose_blend=True, scale=True))
    ps = make_patch_set([(Image(ld), Image(nd))], cfg, seed=3)
    for a, b in ps:
        ma, mb = a > a.min() + 1e-6, b > b.min() + 1e-6
        assert np.array_equal(ma, mb)


def test_patch_set_is_seeded():
    cfg = PreprocessConfig(patch_size=32, patch_stride=16, augment=AugmentConfig(rotate_flip=True, dose_blend=True))
    a = make_patch_set([_pair()], cfg, seed=1)
    b = make_patch_set([_pair()], cfg, seed=1)
    assert np.array_equal(a.ld, b.ld) and np.array_equal(a.nd, b.nd)


def test_training_manifest(tmp_path):
    ld, nd = _pair()
    write_image(ld, tmp_path / "ld.f32")
    write_image(nd, tmp_path / "nd.f32")
    (tmp_path / "m.json").write_text(json.dumps([{"ld": "ld.f32", "nd": "nd.f32"}]))
    pairs = load_training_manifest(tmp_path / "m.json")
    assert pairs[0][0] == ld and pairs[0][1] == nd
    with pytest.raises(DataError):
        load_training_manifest(tmp_path / "none.json")


# losses

def test_mse_zero_at_target(rng):
    p = rng.random((2, 8, 8))
    value, grad, gw = loss_and_grad(LossConfig("mse"), p, p.copy())
    assert value == 0.0 and not grad.any() and gw is None


def test_weight_decay_example(rng):
    w = Cnn3Weights.he_init(0, dtype=np.float64)
    p = rng.random((2, 8, 8))
    value, grad, gw = loss_and_grad(LossConfig("mse_wd", beta=1e-3), p, p.copy(), w)
    assert value == pytest.approx(0.5e-3 * w.sq_norm())
    assert not grad.any()
    for g, q in zip(gw, w.params):
        assert np.allclose(g, 1e-3 * q)
    with pytest.raises(DataError):
        loss_and_grad(LossConfig("mse_wd"), p, p)


def test_mae_sign_at_zero():
    p = np.array([[0.5, 0.2]])
    _, grad, _ = loss_and_grad(LossConfig("mae"), p, np.array([[0.5, 0.0]]))
    assert grad[0, 0] == 0.0 and grad[0, 1] > 0


def test_loss_config_validation():
    with pytest.raises(DataError):
        LossConfig("huber")
    with pytest.raises(DataError):
        LossConfig(lam=-1.0)
    with pytest.raises(DataError):
        LossConfig(alpha=1.5)
    assert LossConfig("msel1").kind == "mse_l1prior" and LossConfig().alpha == 0.84


@pytest.mark.parametrize("kind", LOSS_KINDS)
def test_loss_gradients(kind):
    assert loss_pred_error(kind, seed=1, lam=0.2, beta=1e-2) < 1e-3


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(LOSS_KINDS), st.integers(0, 1000))
def test_loss_invariant_under_batch_permutation(kind, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.random((5, 8, 8)), rng.random((5, 8, 8))
    w = Cnn3Weights.he_init(0, dtype=np.float64)
    cfg = LossConfig(kind, lam=0.1)
    perm = rng.permutation(5)
    v, g, _ = loss_and_grad(cfg, p, t, w)
    vp, gp, _ = loss_and_grad(cfg, p[perm], t[perm], w)
    assert vp == pytest.approx(v, rel=1e-12)
    assert np.allclose(gp, g[perm])
    # batch gradient = mean of per-sample gradients
    singles = np.stack([loss_and_grad(cfg, p[i:i + 1], t[i:i + 1], w)[1][0] for i in range(5)])
    assert np.allclose(g, singles / 5)


# network

def test_weight_shapes_and_validation():
    w = Cnn3Weights.zeros()
    assert [p.shape for p in w.params] == [(3, 3, 1, 64), (64,), (3, 3, 64, 64), (64,), (3, 3, 64, 1), (1,)]
    bad = w.params[:]
    bad[1] = np.full(64, np.nan)
    with pytest.raises(DataError):
        Cnn3Weights(bad)
    with pytest.raises(DataError):
        Cnn3Weights(w.params[:5])


def test_zero_weights_give_zero(rng):
    assert not cnn3_forward(rng.random((9, 7)), Cnn3Weights.zeros()).any()


def test_identity_weights(rng):
    x = rng.random((3, 12, 10)).astype(np.float32)
    assert np.array_equal(cnn3_forward(x, Cnn3Weights.identity()), x)


def test_translation_equivariance(rng):
    w = Cnn3Weights.he_init(4, dtype=np.float64)
    x = rng.random((20, 20))
    y = cnn3_forward(x, w)
    ys = cnn3_forward(np.roll(x, (1, 1), axis=(0, 1)), w)
    # three 3x3 layers reach 3 px; stay clear of both the border and the wrapped row/column
    assert np.array_equal(ys[5:-4, 5:-4], y[4:-5, 4:-5])


def test_undersized_input():
    with pytest.raises(DataError):
        cnn3_forward(np.zeros((2, 5)), Cnn3Weights.zeros())


@pytest.mark.parametrize("seed", [0, 1])
def test_weight_gradients_small_step(seed):
    errors = cnn3_weight_errors(seed=seed, step=1e-5)
    assert sum(errors["kink_skipped"].values()) <= 3
    assert max(v for k, v in errors.items() if k != "kink_skipped") < 1e-6


def test_input_jacobian():
    assert cnn3_input_jvp_error(0) < 1e-3


def test_piecewise_linear_in_input(rng):
    w = Cnn3Weights.he_init(2, dtype=np.float64)
    x = rng.random((8, 8))
    d = rng.normal(size=x.shape)
    # tiny steps stay within one linear piece, so the output is exactly affine along d
    y0, y1, y2 = (cnn3_forward(x + t * d, w) for t in (0.0, 1e-9, 2e-9))
    assert np.allclose(y2 - y1, y1 - y0, atol=1e-15)


def test_weights_io(tmp_path):
    w = Cnn3Weights.he_init(1, normalization="normF", lo=-1024.0, hi=3072.0)
    back = load_weights(save_weights(w, tmp_path / "a.w"))
    assert back.digest() == w.digest() and back.normalization == "normF" and back.hi == 3072.0
    (tmp_path / "b.w").write_bytes(b"garbage")
    with pytest.raises(DataError):
        load_weights(tmp_path / "b.w")
    blob = (tmp_path / "a.w").read_bytes()
    (tmp_path / "c.w").write_bytes(blob[:-4])
    with pytest.raises(DataError):
        load_weights(tmp_path / "c.w")


def test_training_identity_task():
    rng = np.random.default_rng(0)
    x = rng.random((256, 16, 16)).astype(np.float32)
    patches = PatchSet(x, x.copy())
    cfg = TrainConfig(learning_rate=1e-3, minibatch=32, epochs=25, seed=0)
    initial = loss_and_grad(LossConfig(), cnn3_forward(x, Cnn3Weights.he_init(0)), x)[0]
    res = cnn3_train(patches, LossConfig(), cfg)
    assert res.steps == 200
    final = loss_and_grad(LossConfig(), cnn3_forward(x, res.weights), x)[0]
    assert final < 0.1 * initial


def test_training_config_errors():
    with pytest.raises(DataError):
        TrainConfig(epochs=0)
    with pytest.raises(DataError):
        TrainConfig(learning_rate=0)
    with pytest.raises(DataError):
        TrainConfig(minibatch=0)
    with pytest.raises(DataError):
        TrainConfig(optimizer="rmsprop")
    assert TrainConfig(minibatch=37).minibatch == 37
    with pytest.raises(DataError):
        cnn3_train(PatchSet(np.zeros((0, 8, 8)), np.zeros((0, 8, 8))), LossConfig(), TrainConfig())


@pytest.mark.parametrize("optimizer", ["adam", "sgd_momentum"])
def test_training_is_bitwise_deterministic(optimizer):
    rng = np.random.default_rng(3)
    x = rng.random((40, 12, 12)).astype(np.float32)
    y = (0.5 * x).astype(np.float32)
    cfg = TrainConfig(learning_rate=1e-3, minibatch=16, epochs=3, seed=9, optimizer=optimizer)
    a = cnn3_train(PatchSet(x, y), LossConfig("mse_tvprior", lam=1e-3), cfg)
    b = cnn3_train(PatchSet(x, y), LossConfig("mse_tvprior", lam=1e-3), cfg)
    assert a.weight_digests == b.weight_digests and a.loss_trace == b.loss_trace


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch():
    x = np.random.default_rng(0).random((8, 8, 8)).astype(np.float32)
    cfg = TrainConfig(learning_rate=1e6, minibatch=8, epochs=5, optimizer="sgd_momentum")
    with pytest.raises(NumericalError, match="epoch"):
        cnn3_train(PatchSet(x, x * 1e3), LossConfig(), cfg)


# classical

def test_gaussian_identity_and_taps():
    img = Image(np.random.default_rng(0).normal(size=(16, 16)))
    assert gaussian_denoise(img, 0.0) == img
    taps = gaussian_taps(1.0)
    assert taps.size == 9 and taps.sum() == pytest.approx(1.0) and np.allclose(taps, taps[::-1])
    with pytest.raises(DataError):
        gaussian_denoise(img, -1.0)


def test_gaussian_nps_transfer():
    sigma_px, spacing, sn = 1.0, 0.5, 10.0
    rng = np.random.default_rng(0)
    imgs = [gaussian_denoise(Image(rng.normal(0, sn, (160, 160)), spacing), sigma_px) for _ in range(50)]
    f, radial = nps_estimate(imgs, Roi.centered(160, 160, 128)).curve()
    expected = sn ** 2 * spacing ** 2 * np.exp(-4 * math.pi ** 2 * (sigma_px * spacing) ** 2 * f ** 2)
    keep = expected > 0.05 * expected.max()
    assert np.all(np.abs(radial[keep] / expected[keep] - 1.0) <= 0.15)


def test_tv_limits():
    img = Image(np.random.default_rng(0).normal(0, 50, (32, 32)))
    assert np.abs(tv_denoise(img, 1e-9, 50).as_float64() - img.as_float64()).max() < 1e-3
    flat = Image(np.full((16, 16), 42.0))
    assert tv_denoise(flat, 30.0, 20) == flat
    with pytest.raises(DataError):
        tv_denoise(img, 0.0)
    with pytest.raises(DataError):
        tv_denoise(img, 1.0, 0)


@pytest.mark.slow
def test_tv_on_noisy_water():
    spec = make_water_cylinder()
    noisy = scan(spec, ScanSetup(), 0.25, seed=1)
    out = tv_denoise(noisy, 20.0, 100)
    roi = Roi.centered(512, 512, 128)
    assert extract_roi(out, roi).as_float64().var() < extract_roi(noisy, roi).as_float64().var()
    before = hu_accuracy(body_profile(noisy, spec)).plateau_bias
    after = hu_accuracy(body_profile(out, spec)).plateau_bias
    assert abs(after - before) < 2.0


# application

def test_identity_denoiser_is_bitwise():
    imgs = {"a": _pair()[0], "b": _pair(1)[0]}
    out = apply_denoiser("identity", imgs)
    assert all(out[k].data.tobytes() == imgs[k].data.tobytes() for k in imgs)


@pytest.mark.parametrize("mode", ["unity", "normF"])
def test_cnn3_identity_pipeline_in_hu(mode):
    spec = make_water_cylinder(60.0)
    img = rasterize(spec, 256, 256)
    w = Cnn3Weights.identity(normalization=mode, lo=-1024.0, hi=3072.0)
    out = apply_denoiser("cnn3", {"w": img}, weights=w)["w"]
    assert np.allclose(out.data, img.data, atol=1e-3)
    assert abs(hu_accuracy(body_profile(out, spec)).plateau_bias) < 1e-3


def test_cnn3_needs_normalization():
    with pytest.raises(DataError, match="normalization"):
        cnn3_denoise(Image(np.zeros((8, 8))), Cnn3Weights.identity())


def test_external_denoiser(tmp_path):
    a, b = _pair()[0], _pair(1)[0]
    write_image(b, tmp_path / "x.f32")
    out = apply_denoiser("external", {"x.f32": a}, directory=tmp_path)
    assert out["x.f32"] == b
    with pytest.raises(DataError, match="y.f32"):
        apply_denoiser("external", {"x": a, "y": a}, directory=tmp_path)


def test_unknown_kind_and_describe(tmp_path):
    with pytest.raises(DataError):
        make_denoiser("bm3d")
    d = describe("cnn3", weights=Cnn3Weights.identity(normalization="unity"))
    assert d["weights"]["normalization"] == "unity"
    json.dumps(describe("external", directory=tmp_path))
