"""Fundus image enhancement: brightness balance, CLAHE, denoising, normalization.

All stages operate on ``uint8`` RGB arrays of shape ``(H, W, 3)`` and return
arrays of the same shape. Only :func:`normalize_channels` leaves the 8-bit
domain.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import cv2
import numpy as np

from .errors import ConfigError, PreprocessError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
STATS_VERSION = "1"


@dataclass(frozen=True)
class DatasetStats:
    train_mean_intensity: float
    channel_means: Tuple[float, float, float] = IMAGENET_MEAN
    channel_stds: Tuple[float, float, float] = IMAGENET_STD
    version: str = STATS_VERSION

    def __post_init__(self):
        if not 0.0 <= self.train_mean_intensity <= 255.0:
            raise ValueError("train_mean_intensity must lie in [0, 255]")
        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise ValueError("expected 3 channel means and stds")
        if any(s <= 0 for s in self.channel_stds):
            raise ValueError("channel stds must be strictly positive")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            train_mean_intensity=float(d["train_mean_intensity"]),
            channel_means=tuple(d["channel_means"]),
            channel_stds=tuple(d["channel_stds"]),
            version=str(d.get("version", STATS_VERSION)),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def black(self):
        """Normalized value of a zero pixel, per channel."""
        return tuple(-m / s for m, s in zip(self.channel_means, self.channel_stds))


@dataclass
class PreprocessConfig:
    brightness: bool = True
    clahe: bool = True
    # Number of tiles along (x, y); OpenCV's tileGridSize convention.
    clahe_tile_grid: Tuple[int, int] = (8, 8)
    # Relative limit: a histogram bin is clipped at clip_limit * tile_pixels / 256.
    clahe_clip_limit: float = 40.0
    clahe_color: str = "lab"
    denoise: bool = True
    denoise_strength: float = 10.0
    denoise_template: int = 7
    denoise_search: int = 21
    bilateral: bool = True
    bilateral_diameter: int = 9
    bilateral_sigma_color: float = 75.0
    bilateral_sigma_space: float = 75.0

    def validate(self):
        gx, gy = self.clahe_tile_grid
        if gx < 1 or gy < 1:
            raise ConfigError("preprocess.clahe_tile_grid: tiles must be >= 1")
        if self.clahe_clip_limit <= 0:
            raise ConfigError("preprocess.clahe_clip_limit: must be > 0")
        if self.clahe_color not in ("lab", "rgb"):
            raise ConfigError("preprocess.clahe_color: expected 'lab' or 'rgb'")
        if self.denoise_strength <= 0:
            raise ConfigError("preprocess.denoise_strength: must be > 0")
        if self.denoise_template < 1 or self.denoise_template % 2 == 0:
            raise ConfigError("preprocess.denoise_template: must be odd and >= 1")
        if self.denoise_search < 1 or self.denoise_search % 2 == 0:
            raise ConfigError("preprocess.denoise_search: must be odd and >= 1")
        if self.bilateral_diameter < 1:
            raise ConfigError("preprocess.bilateral_diameter: must be >= 1")
        if self.bilateral_sigma_color <= 0 or self.bilateral_sigma_space <= 0:
            raise ConfigError("preprocess.bilateral_sigma_*: must be > 0")
        return self

    def digest(self, stats: Optional[DatasetStats] = None):
        payload = dataclasses.asdict(self)
        if stats is not None:
            payload["stats"] = stats.to_dict()
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def check_rgb(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("image must be at least 1 x 1")
    if image.dtype != np.uint8:
        if np.issubdtype(image.dtype, np.floating) and not np.all(np.isfinite(image)):
            raise ValueError("image contains non-finite values")
        if image.min() < 0 or image.max() > 255:
            raise ValueError("image values must lie in [0, 255]")
        image = np.rint(image).astype(np.uint8)
    return image


def compute_dataset_stats(train_images: Iterable[np.ndarray]) -> DatasetStats:
    """Brightness target = mean intensity over every pixel and channel of the training images."""
    total = 0.0
    count = 0
    for img in train_images:
        img = check_rgb(img)
        total += float(img.sum(dtype=np.float64))
        count += img.size
    if count == 0:
        raise ValueError("no training images: cannot compute dataset statistics")
    return DatasetStats(train_mean_intensity=total / count)


def brightness_balance(image, target_mean, *, tol=0.5, max_iter=60):
    """Scale all channels by one gain so the clipped mean hits ``target_mean``.

    The plain ratio ``target / mean`` is exact unless pixels saturate at 255.
    When they do, the clipped mean is still monotone in the gain, so the gain
    is found by bisection over the image's 256-bin histogram. An image whose
    mean is already within ``tol`` of the target is returned unchanged.
    """
    image = check_rgb(image)
    if not 0.0 < target_mean < 255.0:
        raise ValueError(f"target_mean must lie in (0, 255), got {target_mean}")
    hist = np.bincount(image.ravel(), minlength=256).astype(np.float64)
    levels = np.arange(256, dtype=np.float64)
    n = hist.sum()
    current = float(hist @ levels) / n
    if current <= 0:
        raise ValueError("all-black image: cannot rescale brightness")
    if abs(current - target_mean) <= tol:
        # already on target: a second pass must not move the image
        return image.copy()

    def clipped_mean(g):
        return float(hist @ np.clip(np.rint(levels * g), 0, 255)) / n

    gain = target_mean / current
    if abs(clipped_mean(gain) - target_mean) > tol:
        lo, hi = 0.0, gain
        smallest = int(np.flatnonzero(hist[1:])[0]) + 1
        g_max = 255.5 / smallest
        while clipped_mean(hi) < target_mean and hi < g_max:
            hi = min(hi * 2, g_max)
        if clipped_mean(hi) < target_mean:
            logger.warning("target mean %.2f unreachable; saturating at %.2f", target_mean, clipped_mean(hi))
            gain = hi
        else:
            for _ in range(max_iter):
                mid = 0.5 * (lo + hi)
                if clipped_mean(mid) < target_mean:
                    lo = mid
                else:
                    hi = mid
                if abs(clipped_mean(hi) - target_mean) <= tol or hi - lo < 1e-9:
                    break
            gain = lo if abs(clipped_mean(lo) - target_mean) < abs(clipped_mean(hi) - target_mean) else hi
    lut = np.clip(np.rint(levels * gain), 0, 255).astype(np.uint8)
    return lut[image]


def clahe(image, tile_grid=(8, 8), clip_limit=40.0, color="lab"):
    image = check_rgb(image)
    if clip_limit <= 0:
        raise ValueError(f"clip_limit must be > 0, got {clip_limit}")
    gx, gy = (int(t) for t in tile_grid)
    if gx < 1 or gy < 1:
        raise ValueError("tile_grid entries must be >= 1")
    op = cv2.createCLAHE(clipLimit=float(clip_limit), tileGridSize=(gx, gy))
    if color == "rgb":
        return np.stack([op.apply(np.ascontiguousarray(image[..., c])) for c in range(3)], axis=-1)
    if color != "lab":
        raise ValueError(f"unknown color mode {color!r}")
    lab = cv2.cvtColor(image, cv2.COLOR_RGB2LAB)
    lab[..., 0] = op.apply(np.ascontiguousarray(lab[..., 0]))
    return cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)


def nl_means_denoise(image, strength=10.0, template_size=7, search_size=21):
    # Joint patch distance over all three channels; the Lab variant in OpenCV
    # is not an identity on constant images because of the color round trip.
    image = check_rgb(image)
    if strength <= 0:
        raise ValueError(f"strength must be > 0, got {strength}")
    return cv2.fastNlMeansDenoising(
        np.ascontiguousarray(image), None, h=float(strength),
        templateWindowSize=int(template_size), searchWindowSize=int(search_size),
    )


def bilateral_filter(image, diameter=9, sigma_color=75.0, sigma_space=75.0):
    """Edge-preserving smoothing.

    Weights are ``exp(-r^2 / 2 sigma_space^2) * exp(-d^2 / 2 sigma_color^2)``
    over a disc of radius ``diameter // 2``, where ``d`` is the L1 color
    distance summed over channels. Borders are reflected (``dcb|abcd|cba``
    without repeating the edge pixel).
    """
    image = check_rgb(image)
    if diameter < 1:
        raise ValueError("diameter must be >= 1")
    if sigma_color <= 0 or sigma_space <= 0:
        raise ValueError("sigmas must be > 0")
    return cv2.bilateralFilter(np.ascontiguousarray(image), int(diameter), float(sigma_color), float(sigma_space))


def normalize_channels(image, stats: DatasetStats):
    image = check_rgb(image)
    mean = np.asarray(stats.channel_means, dtype=np.float32)
    std = np.asarray(stats.channel_stds, dtype=np.float32)
    return ((image.astype(np.float32) / 255.0) - mean) / std


def denormalize_channels(pixels, stats: DatasetStats):
    """Inverse of :func:`normalize_channels`, without re-quantizing to 8 bits."""
    mean = np.asarray(stats.channel_means, dtype=np.float32)
    std = np.asarray(stats.channel_stds, dtype=np.float32)
    return (np.asarray(pixels, dtype=np.float32) * std + mean) * 255.0


def enhance(image, stats: DatasetStats, config: Optional[PreprocessConfig] = None):
    """Run every enabled 8-bit stage, in order: brightness, CLAHE, NL-means, bilateral."""
    cfg = config or PreprocessConfig()
    stages = [
        ("brightness_balance", cfg.brightness, lambda x: brightness_balance(x, stats.train_mean_intensity)),
        ("clahe", cfg.clahe, lambda x: clahe(x, cfg.clahe_tile_grid, cfg.clahe_clip_limit, cfg.clahe_color)),
        ("nl_means_denoise", cfg.denoise,
         lambda x: nl_means_denoise(x, cfg.denoise_strength, cfg.denoise_template, cfg.denoise_search)),
        ("bilateral_filter", cfg.bilateral,
         lambda x: bilateral_filter(x, cfg.bilateral_diameter, cfg.bilateral_sigma_color, cfg.bilateral_sigma_space)),
    ]
    try:
        out = check_rgb(image)
    except ValueError as exc:
        raise PreprocessError("input", str(exc)) from exc
    for name, enabled, fn in stages:
        if not enabled:
            continue
        try:
            out = fn(out)
        except (ValueError, cv2.error) as exc:
            raise PreprocessError(name, str(exc)) from exc
    return out


def preprocess_pipeline(image, stats: DatasetStats, config: Optional[PreprocessConfig] = None):
    """Enhance then normalize; returns a float32 ``(H, W, 3)`` array."""
    return normalize_channels(enhance(image, stats, config), stats)


class PreprocessCache:
    """Lossless on-disk cache of enhanced 8-bit images (and their masks).

    Entries live at ``<root>/<split>/<source_id>.npz`` and record the digest
    of the preprocessing config and stats that produced them; a digest
    mismatch is treated as a miss.
    """

    def __init__(self, root, digest):
        self.root = Path(root)
        self.digest = digest

    def path(self, split, source_id):
        return self.root / split / f"{source_id}.npz"

    def has(self, split, source_id):
        p = self.path(split, source_id)
        if not p.exists():
            return False
        try:
            with np.load(p) as z:
                return str(z["digest"]) == self.digest
        except (OSError, KeyError, ValueError):
            return False

    def put(self, split, source_id, image, mask):
        p = self.path(split, source_id)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.name + ".tmp.npz")
        np.savez_compressed(tmp, image=image, mask=mask, digest=np.array(self.digest))
        os.replace(tmp, p)

    def get(self, split, source_id):
        with np.load(self.path(split, source_id)) as z:
            if str(z["digest"]) != self.digest:
                raise KeyError(f"stale cache entry for {source_id}")
            return z["image"], z["mask"]

    def ids(self, split) -> Sequence[str]:
        d = self.root / split
        if not d.is_dir():
            return []
        return sorted(p.name[: -len(".npz")] for p in d.glob("*.npz") if not p.name.endswith(".tmp.npz"))
