"""IDRiD ingestion, train/val splitting, augmentation and batching."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

from .errors import ConfigError, DataError
from .preprocess import DatasetStats, normalize_channels

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".tif", ".tiff", ".bmp")


class LesionType(str, enum.Enum):
    MA = "MA"  # microaneurysms
    SE = "SE"  # soft exudates
    EX = "EX"  # hard exudates
    HE = "HE"  # hemorrhages

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ConfigError(f"lesion: expected one of MA, SE, EX, HE, got {value!r}") from None


@dataclass
class Sample:
    """One aligned image/mask pair.

    ``image`` holds enhanced 8-bit RGB pixels; channel normalization happens
    when batches are assembled, so crops and rotations fill with true black.
    """

    image: np.ndarray
    mask: np.ndarray
    source_id: str
    lesion: Optional[LesionType] = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.source_id}: image must be H x W x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DataError(
                f"{self.source_id}: mask {self.mask.shape} not aligned with image {self.image.shape[:2]}"
            )

    @property
    def has_lesion(self):
        return bool(self.mask.any())


@dataclass
class SplitManifest:
    train_ids: List[str]
    val_ids: List[str]
    test_ids: List[str]
    seed: int
    lesion: Optional[str] = None
    ratio: float = 0.8

    def __post_init__(self):
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("split manifest lists overlap")

    def save(self, path):
        Path(path).write_text(json.dumps(self.__dict__, indent=2))

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class DatasetConfig:
    root: str = "data/idrid"
    # ``{split}`` expands to a value of ``split_dirs``; ``{lesion}`` to ``lesion_dirs``.
    image_glob: str = "images/{split}/*.jpg"
    mask_glob: str = "masks/{lesion}/{split}/*"
    split_dirs: Dict[str, str] = field(default_factory=lambda: {"train": "train", "test": "test"})
    lesion_dirs: Dict[str, str] = field(default_factory=lambda: {t.value: t.value for t in LesionType})
    cache_dir: str = "cache"
    train_ratio: float = 0.8
    crop_size: int = 512
    max_rotation: float = 20.0
    crop_foreground_prob: float = 0.0

    def validate(self):
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError("dataset.train_ratio: must lie in (0, 1)")
        if self.crop_size < 16 or self.crop_size % 16:
            raise ConfigError("dataset.crop_size: must be a positive multiple of 16")
        if self.max_rotation < 0:
            raise ConfigError("dataset.max_rotation: must be >= 0")
        if not 0.0 <= self.crop_foreground_prob <= 1.0:
            raise ConfigError("dataset.crop_foreground_prob: must lie in [0, 1]")
        for k in ("train", "test"):
            if k not in self.split_dirs:
                raise ConfigError(f"dataset.split_dirs: missing {k!r}")
        for t in LesionType:
            if t.value not in self.lesion_dirs:
                raise ConfigError(f"dataset.lesion_dirs: missing {t.value!r}")
        return self


def official_idrid_config(**overrides) -> DatasetConfig:
    """Globs for the segmentation part of the IDRiD download, rooted at ``A. Segmentation``."""
    cfg = DatasetConfig(
        image_glob="1. Original Images/{split}/*.jpg",
        mask_glob="2. All Segmentation Groundtruths/{split}/{lesion}/*",
        split_dirs={"train": "a. Training Set", "test": "b. Testing Set"},
        lesion_dirs={"MA": "1. Microaneurysms", "HE": "2. Haemorrhages", "EX": "3. Hard Exudates",
                     "SE": "4. Soft Exudates"},
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


def read_rgb(path):
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DataError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def read_mask(path):
    m = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if m is None:
        raise DataError(f"cannot read mask {path}")
    if m.ndim == 3:
        m = m.max(axis=2)
    return (m > 0).astype(np.uint8)


def _match_mask(stem, masks):
    for m in masks:
        if m.stem == stem or m.stem.startswith(stem + "_"):
            return m
    return None


def list_idrid(root, lesion, split="train", config: Optional[DatasetConfig] = None):
    """Pair every image of ``split`` with its lesion mask path (``None`` when absent)."""
    cfg = config or DatasetConfig()
    lesion = LesionType.parse(lesion)
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    split_dir = cfg.split_dirs[split]
    image_pattern = cfg.image_glob.format(split=split_dir, lesion=cfg.lesion_dirs[lesion.value])
    mask_pattern = cfg.mask_glob.format(split=split_dir, lesion=cfg.lesion_dirs[lesion.value])
    images = sorted(p for p in root.glob(image_pattern) if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise DataError(f"no images match {root / image_pattern}")
    masks = sorted(p for p in root.glob(mask_pattern) if p.suffix.lower() in IMAGE_SUFFIXES)
    return [(p.stem, p, _match_mask(p.stem, masks)) for p in images]


def load_pair(source_id, image_path, mask_path, lesion=None):
    image = read_rgb(image_path)
    if mask_path is None:
        mask = np.zeros(image.shape[:2], np.uint8)
    else:
        mask = read_mask(mask_path)
        if mask.shape != image.shape[:2]:
            raise DataError(
                f"{mask_path.name}: mask size {mask.shape[::-1]} does not match image size {image.shape[1::-1]}"
            )
    return Sample(image, mask, source_id, lesion)


def load_idrid(root, lesion, split="train", config: Optional[DatasetConfig] = None) -> List[Sample]:
    lesion = LesionType.parse(lesion)
    return [load_pair(sid, ip, mp, lesion) for sid, ip, mp in list_idrid(root, lesion, split, config)]


def split_train_val(ids: Sequence[str], ratio=0.8, seed=0, lesion=None, test_ids=()) -> SplitManifest:
    if not ids:
        raise DataError("cannot split an empty id list")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    ordered = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    n_train = math.floor(len(ordered) * ratio + 1e-9)
    return SplitManifest(
        train_ids=shuffled[:n_train],
        val_ids=shuffled[n_train:],
        test_ids=list(test_ids),
        seed=seed,
        lesion=None if lesion is None else LesionType.parse(lesion).value,
        ratio=ratio,
    )


def random_crop(sample: Sample, size, rng: np.random.Generator, foreground_prob=0.0) -> Sample:
    h, w = sample.mask.shape
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image size {h}x{w}")
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    if foreground_prob > 0 and rng.random() < foreground_prob:
        ys, xs = np.nonzero(sample.mask)
        if len(ys):
            k = int(rng.integers(len(ys)))
            y0 = int(np.clip(ys[k] - rng.integers(size), 0, h - size))
            x0 = int(np.clip(xs[k] - rng.integers(size), 0, w - size))
    return Sample(
        sample.image[y0:y0 + size, x0:x0 + size].copy(),
        sample.mask[y0:y0 + size, x0:x0 + size].copy(),
        sample.source_id,
        sample.lesion,
    )


def rotate(sample: Sample, degrees) -> Sample:
    """Rotate image (bilinear) and mask (nearest) about the centre, zero fill."""
    h, w = sample.mask.shape
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), float(degrees), 1.0)
    image = cv2.warpAffine(sample.image, m, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    mask = cv2.warpAffine(sample.mask, m, (w, h), flags=cv2.INTER_NEAREST,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return Sample(image, (mask > 0).astype(np.uint8), sample.source_id, sample.lesion)


def random_rotate(sample: Sample, max_degrees, rng: np.random.Generator) -> Sample:
    if max_degrees < 0:
        raise ValueError("max_degrees must be >= 0")
    if max_degrees == 0:
        return sample
    return rotate(sample, rng.uniform(-max_degrees, max_degrees))


def augment(sample: Sample, crop_size, max_rotation, rng, foreground_prob=0.0) -> Sample:
    out = random_crop(sample, crop_size, rng, foreground_prob)
    return random_rotate(out, max_rotation, rng)


def to_tensors(samples: Sequence[Sample], stats: Optional[DatasetStats] = None):
    stats = stats or DatasetStats(train_mean_intensity=128.0)
    images = np.stack([normalize_channels(s.image, stats).transpose(2, 0, 1) for s in samples])
    masks = np.stack([s.mask[None].astype(np.float32) for s in samples])
    return torch.from_numpy(images), torch.from_numpy(masks)


def make_batches(samples: Sequence[Sample], batch_size, rng: Optional[np.random.Generator] = None,
                 stats: Optional[DatasetStats] = None) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(images B x 3 x S x S, masks B x 1 x S x S)``; the last short batch is kept.

    With ``rng`` the order is shuffled (training); without it the order is fixed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if rng is not None:
        order = rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield to_tensors([samples[i] for i in order[start:start + batch_size]], stats)
