import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bilateral_bruteforce, clahe_reference, gain_iteration_balance
from retina_cgan.errors import ConfigError, PreprocessError
from retina_cgan.preprocess import (
    IMAGENET_MEAN,
    DatasetStats,
    PreprocessConfig,
    bilateral_filter,
    brightness_balance,
    clahe,
    compute_dataset_stats,
    denormalize_channels,
    enhance,
    nl_means_denoise,
    normalize_channels,
    preprocess_pipeline,
)
from retina_cgan.synthetic import synthetic_fundus

STATS = DatasetStats(train_mean_intensity=90.0)


def const(value, h=16, w=16):
    return np.full((h, w, 3), value, np.uint8)


# dataset statistics

def test_stats_mean_of_two_images():
    s = compute_dataset_stats([const(100, 1, 1), const(200, 1, 1)])
    assert s.train_mean_intensity == 150.0


def test_stats_constant_image():
    assert compute_dataset_stats([const(77, 5, 7)]).train_mean_intensity == 77.0


def test_stats_pools_pixels_not_images():
    s = compute_dataset_stats([const(0, 1, 1), const(90, 2, 2)])
    assert s.train_mean_intensity == pytest.approx(72.0)


def test_stats_defaults_and_errors(tmp_path):
    s = compute_dataset_stats([const(10)])
    assert s.channel_means == (0.485, 0.456, 0.406)
    assert s.channel_stds == (0.229, 0.224, 0.225)
    with pytest.raises(ValueError):
        compute_dataset_stats([])
    with pytest.raises(ValueError):
        DatasetStats(100.0, channel_stds=(0.2, 0.0, 0.2))
    s.save(tmp_path / "stats.json")
    assert DatasetStats.load(tmp_path / "stats.json") == s


# brightness balance

def test_brightness_identity():
    assert np.array_equal(brightness_balance(const(50), 50), const(50))


def test_brightness_scales_constant():
    assert np.array_equal(brightness_balance(const(100), 120), const(120))


def test_brightness_clip_aware_two_level():
    img = np.zeros((8, 8, 3), np.uint8)
    img[:, :4] = 10
    img[:, 4:] = 250
    out = brightness_balance(img, 200)
    ref = gain_iteration_balance(img, 200)
    assert abs(out.mean() - 200) <= 1.0
    assert abs(ref.mean() - 200) <= 1.0
    assert out.shape == img.shape


def test_brightness_rejects_black_and_bad_target():
    with pytest.raises(ValueError, match="black"):
        brightness_balance(const(0), 100)
    with pytest.raises(ValueError):
        brightness_balance(const(10), 0)
    with pytest.raises(ValueError):
        brightness_balance(const(10), 255)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), target=st.floats(20, 200))
def test_brightness_hits_target_and_is_idempotent(seed, target):
    img, _ = synthetic_fundus(48, rng=seed)
    img = np.maximum(img, 1)
    once = brightness_balance(img, target)
    assert abs(once.mean() - target) <= 1.0
    twice = brightness_balance(once, target)
    assert abs(twice.mean() - once.mean()) < 0.5
    if abs(once.mean() - target) <= 0.5:
        assert np.array_equal(twice, once)


def test_brightness_preserves_black_background():
    img, _ = synthetic_fundus(64, rng=3)
    out = brightness_balance(img, 140)
    assert np.all(out[img == 0] == 0)


# CLAHE

@pytest.mark.parametrize("clip", [1.0, 2.0, 40.0])
@pytest.mark.parametrize("kind", ["noise", "flat", "two_level"])
def test_clahe_matches_reference(clip, kind):
    r = np.random.default_rng(5)
    if kind == "noise":
        gray = r.normal(120, 30, (64, 64))
    elif kind == "flat":
        gray = r.normal(120, 3, (128, 96))
    else:
        gray = np.where(r.random((64, 64)) < 0.5, 100, 102)
    gray = gray.clip(0, 255).astype(np.uint8)
    out = clahe(np.repeat(gray[..., None], 3, axis=2), (8, 8), clip, color="rgb")
    ref = clahe_reference(gray, (8, 8), clip)
    for c in range(3):
        assert np.abs(out[..., c] - ref).max() <= 0.5 + 1e-9


def test_clahe_widens_two_level_image():
    r = np.random.default_rng(0)
    img = np.repeat(np.where(r.random((64, 64)) < 0.5, 100, 102).astype(np.uint8)[..., None], 3, axis=2)
    out = clahe(img)
    assert out.shape == img.shape and out.dtype == np.uint8
    assert int(out.max()) - int(out.min()) > 2


def test_clahe_defaults_and_errors():
    cfg = PreprocessConfig()
    assert cfg.clahe_tile_grid == (8, 8) and cfg.clahe_clip_limit == 40.0
    with pytest.raises(ValueError):
        clahe(const(10), clip_limit=0)
    with pytest.raises(ValueError):
        clahe(const(10), color="hsv")


def test_clahe_keeps_hue_in_lab_mode():
    img, _ = synthetic_fundus(64, rng=2)
    out = clahe(img)
    assert out.shape == img.shape
    assert out.min() >= 0 and out.max() <= 255


# NL-means and bilateral

@pytest.mark.parametrize("v", [0, 1, 37, 128, 254, 255])
def test_denoisers_identity_on_constants(v):
    img = const(v, 24, 20)
    assert np.array_equal(nl_means_denoise(img), img)
    assert np.array_equal(bilateral_filter(img), img)


def test_nl_means_reduces_noise():
    r = np.random.default_rng(0)
    img = np.clip(np.rint(128 + r.normal(0, 15, (64, 64, 3))), 0, 255).astype(np.uint8)
    out = nl_means_denoise(img, 10)
    assert out.shape == img.shape
    assert out.astype(float).std() < img.astype(float).std()
    assert PreprocessConfig().denoise_strength == 10


def test_bilateral_matches_bruteforce():
    r = np.random.default_rng(1)
    img = r.integers(0, 256, (12, 14, 3)).astype(np.uint8)
    out = bilateral_filter(img, 5, 40.0, 3.0)
    ref = bilateral_bruteforce(img, 5, 40.0, 3.0)
    assert np.abs(out - ref).max() <= 0.5 + 1e-6


def test_bilateral_keeps_step_edge():
    img = np.zeros((10, 12, 3), np.uint8)
    img[:, 6:] = 255
    out = bilateral_filter(img, 5, 10.0, 3.0).astype(float)
    ref = bilateral_bruteforce(img, 5, 10.0, 3.0)
    assert np.all(out[:, :6] < 127.5) and np.all(out[:, 6:] > 127.5)
    assert np.all(ref[:, :6] < 127.5) and np.all(ref[:, 6:] > 127.5)


def test_bilateral_infinite_color_sigma_is_gaussian_blur():
    r = np.random.default_rng(2)
    img = r.integers(0, 256, (10, 11, 3)).astype(np.uint8)
    out = bilateral_filter(img, 5, 1e6, 2.0)
    ref = bilateral_bruteforce(img, 5, 1e6, 2.0, color=False)
    assert np.abs(out - ref).max() <= 0.5 + 1e-6


def test_filter_parameter_errors():
    with pytest.raises(ValueError):
        nl_means_denoise(const(3), 0)
    with pytest.raises(ValueError):
        bilateral_filter(const(3), 0)
    with pytest.raises(ValueError):
        bilateral_filter(const(3), 5, -1, 3)


# normalization

def test_normalize_mean_pixel_maps_to_zero():
    out = normalize_channels(np.array([[[124, 116, 104]]], np.uint8), STATS)
    assert np.all(np.abs(out) < 0.01)


def test_normalize_direct_values():
    out = normalize_channels(const(255, 1, 1), STATS)
    assert out[0, 0, 0] == pytest.approx((1 - 0.485) / 0.229, abs=1e-5)
    zero = normalize_channels(const(0, 2, 2), STATS)
    want = [-0.485 / 0.229, -0.456 / 0.224, -0.406 / 0.225]
    assert np.allclose(zero, np.broadcast_to(want, zero.shape), atol=1e-6)
    assert np.allclose(STATS.black(), want)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_normalize_round_trip(seed):
    img = np.random.default_rng(seed).integers(0, 256, (9, 7, 3)).astype(np.uint8)
    back = denormalize_channels(normalize_channels(img, STATS), STATS)
    assert np.abs(back - img).max() < 1e-5 * 255


# full pipeline

def test_pipeline_shape_and_determinism():
    img, _ = synthetic_fundus(64, rng=11)
    a = preprocess_pipeline(img, STATS)
    b = preprocess_pipeline(img.copy(), STATS)
    assert a.shape == img.shape and a.dtype == np.float32
    assert np.isfinite(a).all()
    assert a.tobytes() == b.tobytes()


def test_pipeline_with_stages_disabled_is_normalization():
    img, _ = synthetic_fundus(64, rng=4)
    cfg = PreprocessConfig(brightness=False, clahe=False, denoise=False, bilateral=False)
    assert np.array_equal(preprocess_pipeline(img, STATS, cfg), normalize_channels(img, STATS))


def test_pipeline_stage_order():
    img, _ = synthetic_fundus(48, rng=6)
    cfg = PreprocessConfig()
    manual = bilateral_filter(nl_means_denoise(clahe(brightness_balance(img, STATS.train_mean_intensity))))
    assert np.array_equal(enhance(img, STATS, cfg), manual)


def test_pipeline_names_failing_stage():
    with pytest.raises(PreprocessError) as exc:
        enhance(const(0), STATS)
    assert exc.value.stage == "brightness_balance"
    cfg = PreprocessConfig(brightness=False, clahe_clip_limit=-1.0)
    with pytest.raises(PreprocessError) as exc:
        enhance(const(9), STATS, cfg)
    assert exc.value.stage == "clahe"
    assert "[clahe]" in str(exc.value)


def test_config_validation_names_key():
    with pytest.raises(ConfigError, match="clahe_clip_limit"):
        PreprocessConfig(clahe_clip_limit=0).validate()
    with pytest.raises(ConfigError, match="denoise_template"):
        PreprocessConfig(denoise_template=4).validate()


def test_digest_tracks_parameters():
    a = PreprocessConfig().digest(STATS)
    assert a == PreprocessConfig().digest(STATS)
    assert a != PreprocessConfig(clahe_clip_limit=20).digest(STATS)
    assert a != PreprocessConfig().digest(DatasetStats(91.0))
    assert IMAGENET_MEAN == (0.485, 0.456, 0.406)
