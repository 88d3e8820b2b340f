"""Pixel-level AP / F1 / precision-recall evaluation and full-image inference."""
from __future__ import annotations

import csv
import json
import time
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigError, DataError, NumericalError
from .preprocess import DatasetStats, normalize_channels


@dataclass
class EvalConfig:
    threshold: float = 0.5
    tile: int = 512
    stride: int = 256
    max_pr_points: int = 2000

    def validate(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("eval.threshold: must lie in [0, 1]")
        if self.tile < 16 or self.tile % 16:
            raise ConfigError("eval.tile: must be a positive multiple of 16")
        if not 1 <= self.stride <= self.tile:
            raise ConfigError("eval.stride: must lie in [1, tile]")
        if self.max_pr_points < 2:
            raise ConfigError("eval.max_pr_points: must be >= 2")
        return self


class ScoreTable:
    """Positive/negative counts per distinct score, scores in descending order.

    Tables from disjoint pixel sets merge exactly, which is how test-set
    metrics are pooled without holding every pixel in memory.
    """

    def __init__(self, thresholds, pos, neg):
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        self.pos = np.asarray(pos, dtype=np.int64)
        self.neg = np.asarray(neg, dtype=np.int64)

    @classmethod
    def from_arrays(cls, scores, labels):
        scores = np.asarray(scores, dtype=np.float64).ravel()
        labels = np.asarray(labels).ravel()
        if scores.shape != labels.shape:
            raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
        if scores.size and not np.all(np.isfinite(scores)):
            raise ValueError("scores contain non-finite values")
        positive = labels > 0
        uniq, inverse = np.unique(-scores, return_inverse=True)
        pos = np.bincount(inverse, weights=positive, minlength=uniq.size).astype(np.int64)
        neg = np.bincount(inverse, minlength=uniq.size).astype(np.int64) - pos
        return cls(-uniq, pos, neg)

    @classmethod
    def merge(cls, tables):
        tables = list(tables)
        if not tables:
            return cls([], [], [])
        uniq, inverse = np.unique(-np.concatenate([t.thresholds for t in tables]), return_inverse=True)
        pos = np.bincount(inverse, weights=np.concatenate([t.pos for t in tables]), minlength=uniq.size)
        neg = np.bincount(inverse, weights=np.concatenate([t.neg for t in tables]), minlength=uniq.size)
        return cls(-uniq, np.rint(pos), np.rint(neg))

    @property
    def n_pos(self):
        return int(self.pos.sum())

    @property
    def n_total(self):
        return int(self.pos.sum() + self.neg.sum())

    def _require_positive(self):
        if self.n_pos == 0:
            raise ValueError("no positive labels: precision-recall metrics are undefined")

    def curve(self):
        """Arrays ``(recall, precision)``, one entry per distinct threshold, descending."""
        self._require_positive()
        tp = np.cumsum(self.pos)
        fp = np.cumsum(self.neg)
        return tp / self.n_pos, tp / (tp + fp)

    def average_precision(self):
        recall, precision = self.curve()
        return float(np.sum(np.diff(recall, prepend=0.0) * precision))

    def confusion_at(self, threshold):
        above = self.thresholds >= threshold
        tp = int(self.pos[above].sum())
        fp = int(self.neg[above].sum())
        fn = self.n_pos - tp
        return tp, fp, fn

    def f1_at(self, threshold):
        tp, fp, fn = self.confusion_at(threshold)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        if precision + recall == 0:
            warnings.warn("F1 undefined (precision + recall = 0); reporting 0", RuntimeWarning, stacklevel=3)
            return 0.0
        return 2 * precision * recall / (precision + recall)

    def pr_points(self):
        recall, precision = self.curve()
        return [(0.0, 1.0)] + list(zip(recall.tolist(), precision.tolist()))


def average_precision(scores, labels):
    """Step-wise AP: ``sum_n (R_n - R_{n-1}) * P_n`` over descending distinct thresholds."""
    return ScoreTable.from_arrays(scores, labels).average_precision()


def f1_score(scores, labels, threshold=0.5):
    """F1 after binarizing with ``score >= threshold``; 0 (with a warning) when undefined."""
    return ScoreTable.from_arrays(scores, labels).f1_at(threshold)


def pr_curve(scores, labels) -> List[Tuple[float, float]]:
    """``(recall, precision)`` per distinct threshold, ``(0, 1)`` first."""
    return ScoreTable.from_arrays(scores, labels).pr_points()


def ap_from_points(points):
    r = np.array([p[0] for p in points])
    p = np.array([p[1] for p in points])
    return float(np.sum(np.diff(r) * p[1:]))


def thin_points(points, max_points):
    if max_points is None or len(points) <= max_points:
        return list(points)
    idx = np.unique(np.rint(np.linspace(0, len(points) - 1, max_points)).astype(int))
    return [points[i] for i in idx]


def _tile_starts(size, tile, stride):
    if size <= tile:
        return [0]
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] + tile < size:
        starts.append(size - tile)
    return starts


@torch.no_grad()
def predict_full_image(gen, image, tile=512, stride=256, fill=None, device="cpu"):
    """Fused probability map for a normalized ``(H, W, 3)`` image.

    Overlapping ``tile`` x ``tile`` windows are predicted one at a time and
    averaged where they overlap. Images smaller than a tile are padded with
    ``fill`` (per-channel; defaults to normalized black) and cropped back.
    """
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    if fill is None:
        fill = DatasetStats(train_mean_intensity=128.0).black()
    ph, pw = max(h, tile), max(w, tile)
    if (ph, pw) != (h, w):
        padded = np.empty((ph, pw, 3), np.float32)
        padded[:] = np.asarray(fill, np.float32)
        padded[:h, :w] = image
        image = padded
    was_training = gen.training
    gen.eval()
    try:
        acc = np.zeros((ph, pw), np.float64)
        count = np.zeros((ph, pw), np.float64)
        for y in _tile_starts(ph, tile, stride):
            for x in _tile_starts(pw, tile, stride):
                patch = torch.from_numpy(np.ascontiguousarray(image[y:y + tile, x:x + tile].transpose(2, 0, 1)))
                out = gen(patch[None].to(device)).fused_map[0, 0].cpu().numpy()
                acc[y:y + tile, x:x + tile] += out
                count[y:y + tile, x:x + tile] += 1.0
    finally:
        gen.train(was_training)
    return (acc / count)[:h, :w].astype(np.float32)


@dataclass
class MetricsReport:
    lesion: str
    model_name: str
    ap: float
    f1: float
    threshold: float
    pr_points: List[Tuple[float, float]]
    n_images: int
    n_pixels_pos: int
    n_pixels: int = 0
    pooling: str = "pixels"
    config_hash: str = ""
    created: float = field(default_factory=time.time)

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path):
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        d = json.loads(text)
        d["pr_points"] = [tuple(p) for p in d["pr_points"]]
        return cls(**d)


def evaluate_model(gen, samples, threshold=0.5, *, stats: Optional[DatasetStats] = None, tile=512, stride=256,
                   model_name="model", lesion="", max_pr_points=None, config_hash="", device="cpu"):
    """Pool every pixel of every sample into one score table and report AP, F1 and the PR curve."""
    if not samples:
        raise DataError("evaluation set is empty")
    stats = stats or DatasetStats(train_mean_intensity=128.0)
    tables = []
    for s in samples:
        prob = predict_full_image(gen, normalize_channels(s.image, stats), tile, stride, stats.black(), device)
        if not np.isfinite(prob).all():
            raise NumericalError(f"non-finite prediction for {s.source_id}")
        tables.append(ScoreTable.from_arrays(prob, s.mask))
    table = ScoreTable.merge(tables)
    if table.n_pos == 0:
        raise DataError("no positive pixels in the evaluation split")
    lesion = getattr(lesion, "value", lesion) or (getattr(samples[0].lesion, "value", samples[0].lesion) or "")
    return MetricsReport(
        lesion=str(lesion),
        model_name=model_name,
        ap=table.average_precision(),
        f1=table.f1_at(threshold),
        threshold=threshold,
        pr_points=thin_points(table.pr_points(), max_pr_points),
        n_images=len(samples),
        n_pixels_pos=table.n_pos,
        n_pixels=table.n_total,
        config_hash=config_hash,
    )


def write_pr_csv(reports: Sequence[MetricsReport], path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "lesion", "recall", "precision"])
        for r in reports:
            for recall, precision in r.pr_points:
                writer.writerow([r.model_name, r.lesion, repr(float(recall)), repr(float(precision))])


def read_pr_csv(path):
    curves = defaultdict(list)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            curves[(row["model"], row["lesion"])].append((float(row["recall"]), float(row["precision"])))
    return dict(curves)


def plot_curves(curves, out_dir, stem="pr"):
    """One PNG per lesion overlaying every model's curve; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_lesion = defaultdict(list)
    for (model, lesion), pts in curves.items():
        by_lesion[lesion].append((model, pts))
    paths = []
    for lesion, entries in sorted(by_lesion.items()):
        fig, ax = plt.subplots(figsize=(5, 5))
        for model, pts in entries:
            r, p = zip(*pts)
            ax.step(r, p, where="post", label=f"{model} (AP={ap_from_points(pts):.4f})")
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_title(f"Precision-recall: {lesion}")
        ax.legend(loc="lower left")
        path = out_dir / f"{stem}_{lesion}.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths


def render_pr_plot(reports: Sequence[MetricsReport], out_dir, stem="pr"):
    if not reports:
        raise ValueError("no reports to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    write_pr_csv(reports, csv_path)
    curves = {}
    for r in reports:
        curves[(r.model_name, r.lesion)] = list(r.pr_points)
    return plot_curves(curves, out_dir, stem), csv_path
