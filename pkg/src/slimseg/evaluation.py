"""Confusion matrices, mIoU, distance transforms and error localisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import boundary_gt

__all__ = [
    "DEFAULT_BINS",
    "ConfusionMatrix",
    "update_confusion",
    "miou",
    "distance_transform",
    "squared_distance_transform",
    "error_distance_histogram",
    "DiffMap",
    "diff_map",
]

DEFAULT_BINS = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0, np.inf)


class ConfusionMatrix:
    """K x K counts; entry (g, p) counts pixels with ground truth g predicted as p."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts.astype(np.int64)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())


def update_confusion(cm: ConfusionMatrix, pred, gt, ignore_index: int = 255) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one prediction/ground-truth pair."""
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    keep = gt != ignore_index
    pred, gt = pred[keep], gt[keep]
    K = cm.num_classes
    if ((gt < 0) | (gt >= K)).any() or ((pred < 0) | (pred >= K)).any():
        raise ValueError(f"labels must lie in [0, {K}) or equal the ignore index")
    counts = np.bincount(gt * K + pred, minlength=K * K).reshape(K, K)
    return ConfusionMatrix(K, cm.counts + counts)


def miou(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Mean IoU over classes present in prediction or ground truth.

    Absent classes get NaN in the per-class vector and are left out of the
    mean.
    """
    c = cm.counts.astype(np.float64)
    inter = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        raise ValueError("no class appears in prediction or ground truth")
    ious = np.full(cm.num_classes, np.nan)
    ious[present] = inter[present] / union[present]
    return float(ious[present].mean()), ious


def squared_distance_transform(boundary: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (integers) to the nearest nonzero pixel.

    Column pass: distance to the nearest boundary pixel in the same column.
    Row pass: minimise ``g[i, j']**2 + (j - j')**2`` over ``j'``.
    """
    b = np.asarray(boundary).astype(bool)
    if b.ndim != 2:
        raise ValueError("distance_transform expects a 2-D map")
    if not b.any():
        raise ValueError("distance_transform needs at least one boundary pixel")
    H, W = b.shape
    big = H + W
    g = np.full((H, W), big, dtype=np.int64)
    run = np.full(W, big, dtype=np.int64)
    for i in range(H):
        run = np.where(b[i], 0, run + 1)
        g[i] = run
    run = np.full(W, big, dtype=np.int64)
    for i in range(H - 1, -1, -1):
        run = np.where(b[i], 0, run + 1)
        g[i] = np.minimum(g[i], run)
    cols = np.arange(W)
    dj2 = (cols[:, None] - cols[None, :]) ** 2  # [j, j']
    g2 = g * g
    return (g2[:, None, :] + dj2[None, :, :]).min(axis=2)


def distance_transform(boundary: np.ndarray) -> np.ndarray:
    return np.sqrt(squared_distance_transform(boundary).astype(np.float64))


def error_distance_histogram(
    pred,
    gt,
    ignore_index: int = 255,
    bins=DEFAULT_BINS,
) -> np.ndarray:
    """Counts of mispredicted pixels binned by distance to the nearest GT border.

    The border is the radius-1 boundary band of ``gt``; bins are half-open
    ``[bins[i], bins[i + 1])``.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    band = boundary_gt(gt, 1, ignore_index)[0]
    dist = distance_transform(band)
    wrong = (pred != gt) & (gt != ignore_index)
    edges = np.asarray(bins, dtype=np.float64)
    counts, _ = np.histogram(dist[wrong], bins=edges)
    return counts.astype(np.int64)


@dataclass
class DiffMap:
    """Per-pixel disagreement between two predictions.

    ``labels`` holds -1 where the predictions agree and the ground-truth id
    where they differ.
    """

    labels: np.ndarray
    ratio: float

    @property
    def disagree(self) -> np.ndarray:
        return self.labels >= 0


def diff_map(pred_a, pred_b, gt) -> DiffMap:
    pred_a, pred_b, gt = np.asarray(pred_a), np.asarray(pred_b), np.asarray(gt)
    if not pred_a.shape == pred_b.shape == gt.shape:
        raise ValueError(f"shape mismatch: {pred_a.shape}, {pred_b.shape}, {gt.shape}")
    differ = pred_a != pred_b
    labels = np.where(differ, gt.astype(np.int64), -1)
    return DiffMap(labels, float(differ.mean()) if differ.size else 0.0)
