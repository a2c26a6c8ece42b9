"""Dataset-level per-class IoU and mean IoU."""

from __future__ import annotations

import math

import numpy as np


def predict_classes(logits: np.ndarray) -> np.ndarray:
    """Argmax over the channel axis; ties go to the lowest class index."""
    return np.argmax(logits, axis=1)


class ConfusionMatrix:
    """Per-class TP/FP/FN counts accumulated over any number of images."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.tp = np.zeros(num_classes, np.int64)
        self.fp = np.zeros(num_classes, np.int64)
        self.fn = np.zeros(num_classes, np.int64)

    def accumulate(self, predicted: np.ndarray, true: np.ndarray) -> "ConfusionMatrix":
        predicted = np.asarray(predicted)
        true = np.asarray(true)
        if predicted.shape != true.shape:
            raise ValueError(f"prediction shape {predicted.shape} != mask shape {true.shape}")
        K = self.num_classes
        pairs = np.bincount((true.astype(np.int64) * K + predicted.astype(np.int64)).ravel(), minlength=K * K)
        cm = pairs.reshape(K, K)  # rows true, columns predicted
        diag = np.diag(cm)
        self.tp += diag
        self.fp += cm.sum(axis=0) - diag
        self.fn += cm.sum(axis=1) - diag
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class counts differ")
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def iou(self, j: int) -> float:
        """TP / (TP + FP + FN); NaN when the class never occurs in prediction or truth."""
        denom = self.tp[j] + self.fp[j] + self.fn[j]
        return float(self.tp[j] / denom) if denom else math.nan

    def ious(self) -> list[float]:
        return [self.iou(j) for j in range(self.num_classes)]

    def mean_iou(self) -> float:
        """Mean over classes with a defined IoU."""
        vals = [v for v in self.ious() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan


def iou(cm: ConfusionMatrix, j: int) -> float:
    return cm.iou(j)


def mean_iou(cm: ConfusionMatrix) -> float:
    return cm.mean_iou()
