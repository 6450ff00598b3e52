"""Segmentation and classification evaluation metrics."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .features import boundary_pixels


def dice_binary(pred: np.ndarray, ref: np.ndarray) -> float:
    pred = pred.astype(bool)
    ref = ref.astype(bool)
    denom = pred.sum() + ref.sum()
    if denom == 0:
        return 1.0
    return 2.0 * (pred & ref).sum() / denom


def iou_binary(pred: np.ndarray, ref: np.ndarray) -> float:
    pred = pred.astype(bool)
    ref = ref.astype(bool)
    union = (pred | ref).sum()
    if union == 0:
        return 1.0
    return (pred & ref).sum() / union


def hd95(pred: np.ndarray, ref: np.ndarray) -> float:
    """95th percentile of symmetric boundary-to-boundary Euclidean distances.

    Percentile is taken over the union of both directed distance sets with
    linear interpolation. Both masks empty -> 0; exactly one empty -> image
    diagonal (sentinel).
    """
    pred = pred.astype(bool)
    ref = ref.astype(bool)
    if not pred.any() and not ref.any():
        return 0.0
    if pred.any() != ref.any():
        h, w = pred.shape
        return float(np.hypot(h, w))
    pa = np.argwhere(boundary_pixels(pred)).astype(np.float64)
    pb = np.argwhere(boundary_pixels(ref)).astype(np.float64)
    d = cdist(pa, pb)
    directed = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(directed, 95, method="linear"))


def precision_recall_f1(labels: np.ndarray, preds: np.ndarray,
                        num_classes: int) -> dict[str, object]:
    """Per-class and macro precision/recall/F1 (zero-division -> 0)."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    precision, recall, f1 = [], [], []
    for c in range(num_classes):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(f)
    return {
        "precision_macro": float(np.mean(precision)),
        "recall_macro": float(np.mean(recall)),
        "f1_macro": float(np.mean(f1)),
        "per_class": {"precision": precision, "recall": recall, "f1": f1},
    }
