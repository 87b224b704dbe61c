"""Segmentation metrics computed from a pixel confusion matrix.

Convention: ``confusion[i, j]`` counts pixels whose ground truth is class
``i`` and prediction is class ``j``.  Classes that never occur (zero row and
zero column) are excluded from the class means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class MetricsReport:
    confusion: np.ndarray
    miou: float
    pixel_acc: float
    mean_acc: float

    def as_dict(self) -> dict:
        return {"miou": self.miou, "pixel_acc": self.pixel_acc, "mean_acc": self.mean_acc}


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    if labels.shape != preds.shape:
        raise ShapeError(f"confusion_matrix: shapes {labels.shape} vs {preds.shape}")
    if labels.size == 0:
        raise DataError("confusion_matrix: no pixels")
    for name, arr in (("labels", labels), ("preds", preds)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise DataError(f"confusion_matrix: {name} outside [0, {num_classes})")
    flat = num_classes * labels.astype(np.int64).ravel() + preds.astype(np.int64).ravel()
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def metrics_from_confusion(confusion: np.ndarray) -> MetricsReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(confusion).astype(np.float64)
    gt = confusion.sum(axis=1).astype(np.float64)
    pred = confusion.sum(axis=0).astype(np.float64)
    union = gt + pred - tp

    present = union > 0
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=present)
    miou = float(iou[present].mean()) if present.any() else 0.0

    labeled = gt > 0
    acc = np.divide(tp, gt, out=np.zeros_like(tp), where=labeled)
    mean_acc = float(acc[labeled].mean()) if labeled.any() else 0.0

    total = confusion.sum()
    pixel_acc = float(tp.sum() / total) if total else 0.0
    return MetricsReport(confusion, miou, pixel_acc, mean_acc)


def segmentation_metrics(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> MetricsReport:
    return metrics_from_confusion(confusion_matrix(labels, preds, num_classes))
