"""Synthetic fundus-like images with blob lesions, for smoke runs and tests."""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .dataset import LesionType, Sample


def synthetic_fundus(size=128, rng=None, n_lesions=(3, 9), radius=(1.5, 4.0), with_lesions=True,
                     optic_disc=True):
    """Return ``(image uint8 HxWx3, mask uint8 HxW)``.

    A reddish disc on black, with vignetting, dark vessel-like curves, an
    unlabelled bright optic disc, pixel noise, and small yellow blobs that
    form the lesion mask.
    """
    rng = np.random.default_rng(rng)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    c = (size - 1) / 2.0
    r = np.hypot(yy - c, xx - c) / (0.47 * size)
    fov = r <= 1.0
    base = np.array([150, 72, 35], np.float32) * rng.uniform(0.8, 1.2)
    shade = (1.0 - 0.35 * r ** 2)[..., None]
    img = base * shade
    for _ in range(int(rng.integers(3, 6))):
        pts = rng.uniform(0.1 * size, 0.9 * size, size=(4, 2))
        t = np.linspace(0, 1, 60)[:, None]
        curve = ((1 - t) ** 3 * pts[0] + 3 * (1 - t) ** 2 * t * pts[1] + 3 * (1 - t) * t ** 2 * pts[2]
                 + t ** 3 * pts[3]).astype(np.int32)
        vessel = np.zeros((size, size), np.uint8)
        cv2.polylines(vessel, [curve], False, 1, thickness=int(rng.integers(1, 3)))
        img[vessel > 0] *= 0.6
    if optic_disc:
        oy, ox = rng.uniform(0.35 * size, 0.65 * size, size=2)
        od = np.exp(-((yy - oy) ** 2 + (xx - ox) ** 2) / (2 * (0.07 * size) ** 2))
        img += od[..., None] * np.array([90, 90, 60], np.float32)
    mask = np.zeros((size, size), np.uint8)
    if with_lesions:
        for _ in range(int(rng.integers(*n_lesions))):
            while True:
                ly, lx = rng.uniform(0.1 * size, 0.9 * size, size=2)
                if np.hypot(ly - c, lx - c) < 0.4 * size:
                    break
            rad = rng.uniform(*radius)
            d = np.hypot(yy - ly, xx - lx)
            w = np.clip(4.0 * (1.0 - d / rad) + 0.5, 0.0, 1.0)
            img = img * (1 - w[..., None]) + w[..., None] * np.array([225, 195, 85], np.float32)
            mask[w >= 0.5] = 1
    img += rng.normal(0, 4.0, img.shape).astype(np.float32)
    img[~fov] = 0
    mask[~fov] = 0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def synthetic_samples(n, size=128, seed=0, lesion=LesionType.EX, **kwargs):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img, mask = synthetic_fundus(size, rng, **kwargs)
        out.append(Sample(img, mask, f"SYN_{i:03d}", lesion))
    return out


def write_idrid_tree(root, n_train=6, n_test=3, size=128, seed=0, lesions=("MA", "SE", "EX", "HE"),
                     lesion_prob=None):
    """Write a corpus in the default ``images/`` + ``masks/<LESION>/`` layout.

    ``lesion_prob`` maps a lesion code to the fraction of images that get a
    mask file for it (default 1.0).
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    lesion_prob = lesion_prob or {}
    k = 0
    for split, n in (("train", n_train), ("test", n_test)):
        (root / "images" / split).mkdir(parents=True, exist_ok=True)
        for _ in range(n):
            k += 1
            sid = f"IDRiD_{k:02d}"
            img, mask = synthetic_fundus(size, rng)
            cv2.imwrite(str(root / "images" / split / f"{sid}.jpg"), cv2.cvtColor(img, cv2.COLOR_RGB2BGR),
                        [cv2.IMWRITE_JPEG_QUALITY, 95])
            for code in lesions:
                d = root / "masks" / code / split
                d.mkdir(parents=True, exist_ok=True)
                if rng.random() < lesion_prob.get(code, 1.0):
                    cv2.imwrite(str(d / f"{sid}_{code}.tif"), mask * 255)
    return root
