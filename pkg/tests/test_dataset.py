import cv2
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from retina_cgan.dataset import (
    DatasetConfig,
    LesionType,
    Sample,
    SplitManifest,
    augment,
    list_idrid,
    load_idrid,
    make_batches,
    official_idrid_config,
    random_crop,
    random_rotate,
    rotate,
    split_train_val,
    to_tensors,
)
from retina_cgan.errors import ConfigError, DataError
from retina_cgan.preprocess import DatasetStats
from retina_cgan.synthetic import synthetic_samples, write_idrid_tree


def blank(h, w, sid="x"):
    return Sample(np.zeros((h, w, 3), np.uint8), np.zeros((h, w), np.uint8), sid)


def fiducial_sample(size=96, half=3):
    s = blank(size, size)
    for cy, cx in [(22, 22), (22, size - 23), (size - 23, 22), (size - 23, size - 23), (size // 2, 30)]:
        s.image[cy - half:cy + half + 1, cx - half:cx + half + 1] = 255
        s.mask[cy - half:cy + half + 1, cx - half:cx + half + 1] = 1
    return s


# splitting

def test_split_54_images():
    ids = [f"IDRiD_{i:02d}" for i in range(1, 55)]
    m = split_train_val(ids, 0.8, seed=0)
    assert (len(m.train_ids), len(m.val_ids)) == (43, 11)


def test_split_is_deterministic_and_small_cases():
    ids = [str(i) for i in range(10)]
    assert split_train_val(ids, 0.8, 3) == split_train_val(list(reversed(ids)), 0.8, 3)
    m = split_train_val(["a", "b"], 0.5, 0)
    assert len(m.train_ids) == 1 and len(m.val_ids) == 1
    with pytest.raises(DataError):
        split_train_val([], 0.8, 0)
    with pytest.raises(ValueError):
        split_train_val(ids, 1.0, 0)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 200), ratio=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_split_partitions_exhaustively(n, ratio, seed):
    ids = [f"id{i}" for i in range(n)]
    m = split_train_val(ids, ratio, seed)
    assert len(m.train_ids) == int(np.floor(n * ratio + 1e-9))
    assert sorted(m.train_ids + m.val_ids) == sorted(ids)
    assert not set(m.train_ids) & set(m.val_ids)


def test_manifest_round_trip_and_overlap(tmp_path):
    m = split_train_val([str(i) for i in range(7)], 0.8, 1, lesion="se", test_ids=["t1", "t2"])
    m.save(tmp_path / "m.json")
    assert SplitManifest.load(tmp_path / "m.json") == m
    assert m.lesion == "SE"
    with pytest.raises(DataError):
        SplitManifest(["a"], ["a"], [], 0)


# lesion parsing and samples

def test_lesion_type_values():
    assert [t.value for t in LesionType] == ["MA", "SE", "EX", "HE"]
    assert LesionType.parse("ex") is LesionType.EX
    with pytest.raises(ConfigError):
        LesionType.parse("OD")


def test_sample_requires_alignment():
    with pytest.raises(DataError, match="not aligned"):
        Sample(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5), np.uint8), "bad")


# cropping

def test_crop_full_resolution_fundus():
    s = Sample(np.zeros((2848, 4288, 3), np.uint8), np.zeros((2848, 4288), np.uint8), "big")
    out = random_crop(s, 512, np.random.default_rng(0))
    assert out.image.shape == (512, 512, 3) and out.mask.shape == (512, 512)


def test_crop_full_size_is_identity():
    s = synthetic_samples(1, size=64, seed=2)[0]
    out = random_crop(s, 64, np.random.default_rng(0))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), size=st.integers(1, 64))
def test_crop_is_a_window_of_the_pair(seed, size):
    s = synthetic_samples(1, size=64, seed=seed)[0]
    out = random_crop(s, size, np.random.default_rng(seed))
    assert out.mask.sum() <= s.mask.sum()
    # Locate the window through the image and check the mask came from the same place.
    hits = [(y, x) for y in range(65 - size) for x in range(65 - size)
            if np.array_equal(s.image[y:y + size, x:x + size], out.image)]
    assert any(np.array_equal(s.mask[y:y + size, x:x + size], out.mask) for y, x in hits)


def test_crop_too_large():
    with pytest.raises(ValueError):
        random_crop(blank(10, 12), 11, np.random.default_rng(0))


def test_foreground_crop_contains_lesion():
    s = blank(128, 128)
    s.mask[100:104, 5:9] = 1
    rng = np.random.default_rng(0)
    assert all(random_crop(s, 32, rng, foreground_prob=1.0).mask.any() for _ in range(20))


# rotation

def test_rotation_zero_is_identity():
    s = synthetic_samples(1, size=64, seed=0)[0]
    out = random_rotate(s, 0, np.random.default_rng(0))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)
    with pytest.raises(ValueError):
        random_rotate(s, -1, np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(theta=st.floats(-180, 180))
def test_rotation_preserves_disk_area_and_binary_mask(theta):
    s = blank(96, 96)
    yy, xx = np.mgrid[0:96, 0:96]
    disk = (np.hypot(yy - 47.5, xx - 47.5) <= 20).astype(np.uint8)
    s.mask[:] = disk
    s.image[disk > 0] = 200
    out = rotate(s, theta)
    assert set(np.unique(out.mask)) <= {0, 1}
    assert abs(int(out.mask.sum()) - int(disk.sum())) <= 0.02 * disk.sum()


def test_rotation_fills_with_black():
    s = Sample(np.full((32, 32, 3), 200, np.uint8), np.ones((32, 32), np.uint8), "w")
    out = rotate(s, 45)
    assert out.image[0, 0].tolist() == [0, 0, 0] and out.mask[0, 0] == 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_fiducials_stay_aligned_through_augmentation(seed):
    s = fiducial_sample()
    out = augment(s, 80, 20, np.random.default_rng(seed))
    bright = out.image[..., 0] > 127
    n_mask = int(out.mask.sum())
    if n_mask == 0:
        assert not bright.any()
        return
    inter = int((bright & (out.mask > 0)).sum())
    union = int((bright | (out.mask > 0)).sum())
    assert inter / union >= 0.75
    yy, xx = np.mgrid[0:80, 0:80]
    w = out.image[..., 0].astype(float)
    cy_img, cx_img = (yy * w).sum() / w.sum(), (xx * w).sum() / w.sum()
    m = out.mask.astype(float)
    cy_m, cx_m = (yy * m).sum() / m.sum(), (xx * m).sum() / m.sum()
    assert abs(cy_img - cy_m) <= 1.0 and abs(cx_img - cx_m) <= 1.0


# batching

def test_batch_sizes_keep_short_tail():
    samples = synthetic_samples(10, size=32, seed=0)
    sizes = [b[0].shape[0] for b in make_batches(samples, 4, np.random.default_rng(0))]
    assert sizes == [4, 4, 2]
    assert list(make_batches([], 4)) == []
    with pytest.raises(ValueError):
        list(make_batches(samples, 0))


def test_batch_tensors_and_determinism():
    samples = synthetic_samples(6, size=32, seed=1)
    a = list(make_batches(samples, 4, np.random.default_rng(7)))
    b = list(make_batches(samples, 4, np.random.default_rng(7)))
    for (ia, ma), (ib, mb) in zip(a, b):
        assert torch.equal(ia, ib) and torch.equal(ma, mb)
    images, masks = a[0]
    assert images.shape == (4, 3, 32, 32) and masks.shape == (4, 1, 32, 32)
    assert set(torch.unique(masks).tolist()) <= {0.0, 1.0}


def test_eval_batches_keep_order():
    samples = synthetic_samples(3, size=16, seed=2)
    batches = list(make_batches(samples, 1))
    for s, (img, _) in zip(samples, batches):
        assert torch.equal(img, to_tensors([s])[0])


def test_tensors_are_normalized():
    s = blank(16, 16)
    images, _ = to_tensors([s], DatasetStats(100.0))
    assert torch.allclose(images[0, :, 0, 0], torch.tensor(DatasetStats(100.0).black(), dtype=torch.float32))


# loading from disk

def test_load_synthetic_tree(tmp_path):
    write_idrid_tree(tmp_path, n_train=5, n_test=2, size=64, seed=0, lesion_prob={"SE": 0.0})
    train = load_idrid(tmp_path, "EX", "train")
    test = load_idrid(tmp_path, "EX", "test")
    assert len(train) == 5 and len(test) == 2
    assert all(s.mask.shape == s.image.shape[:2] for s in train)
    assert all(set(np.unique(s.mask)) <= {0, 1} for s in train)
    assert any(s.has_lesion for s in train)
    se = load_idrid(tmp_path, "SE", "train")
    assert len(se) == 5 and not any(s.has_lesion for s in se)


def test_load_minimal_pair(tmp_path):
    (tmp_path / "images" / "train").mkdir(parents=True)
    (tmp_path / "masks" / "MA" / "train").mkdir(parents=True)
    cv2.imwrite(str(tmp_path / "images" / "train" / "IDRiD_01.jpg"), np.full((4, 4, 3), 90, np.uint8))
    m = np.zeros((4, 4), np.uint8)
    m[1, 2] = 255
    m[3, 3] = 7
    cv2.imwrite(str(tmp_path / "masks" / "MA" / "train" / "IDRiD_01_MA.png"), m)
    (s,) = load_idrid(tmp_path, "MA", "train")
    assert s.source_id == "IDRiD_01" and s.lesion is LesionType.MA
    assert s.mask.tolist() == (m > 0).astype(int).tolist()


def test_load_reports_misaligned_file(tmp_path):
    (tmp_path / "images" / "train").mkdir(parents=True)
    (tmp_path / "masks" / "HE" / "train").mkdir(parents=True)
    cv2.imwrite(str(tmp_path / "images" / "train" / "IDRiD_07.jpg"), np.zeros((4, 4, 3), np.uint8))
    cv2.imwrite(str(tmp_path / "masks" / "HE" / "train" / "IDRiD_07_HE.tif"), np.zeros((5, 4), np.uint8))
    with pytest.raises(DataError, match="IDRiD_07_HE.tif"):
        load_idrid(tmp_path, "HE", "train")


def test_missing_root_and_custom_globs(tmp_path):
    with pytest.raises(DataError):
        load_idrid(tmp_path / "nope", "EX")
    write_idrid_tree(tmp_path / "d", n_train=2, n_test=1, size=32, seed=1)
    (tmp_path / "d" / "images").rename(tmp_path / "d" / "photos")
    cfg = DatasetConfig(image_glob="photos/{split}/*.jpg")
    assert len(list_idrid(tmp_path / "d", "EX", "train", cfg)) == 2


def test_config_validation():
    with pytest.raises(ConfigError, match="train_ratio"):
        DatasetConfig(train_ratio=1.2).validate()
    with pytest.raises(ConfigError, match="crop_size"):
        DatasetConfig(crop_size=100).validate()


def test_official_layout_counts(tmp_path):
    """Miniature of the download's folder names with the published image and mask counts."""
    cfg = official_idrid_config()
    k = 0
    for split, n, n_se in (("train", 54, 26), ("test", 27, 14)):
        img_dir = tmp_path / "1. Original Images" / cfg.split_dirs[split]
        img_dir.mkdir(parents=True)
        for i in range(n):
            k += 1
            sid = f"IDRiD_{k:02d}"
            cv2.imwrite(str(img_dir / f"{sid}.jpg"), np.full((8, 8, 3), 90, np.uint8))
            for code, folder in cfg.lesion_dirs.items():
                if code == "SE" and i >= n_se:
                    continue
                d = tmp_path / "2. All Segmentation Groundtruths" / cfg.split_dirs[split] / folder
                d.mkdir(parents=True, exist_ok=True)
                cv2.imwrite(str(d / f"{sid}_{code}.tif"), np.full((8, 8), 255, np.uint8))
    for code in ("MA", "HE", "EX", "SE"):
        train = list_idrid(tmp_path, code, "train", cfg)
        test = list_idrid(tmp_path, code, "test", cfg)
        assert (len(train), len(test)) == (54, 27)
        n_masks = sum(m is not None for _, _, m in train)
        assert n_masks == (26 if code == "SE" else 54)
        assert all(m is None or m.stem.startswith(sid) for sid, _, m in train)
    se = load_idrid(tmp_path, "SE", "train", cfg)
    assert sum(s.has_lesion for s in se) == 26
    assert official_idrid_config(crop_size=256).crop_size == 256
