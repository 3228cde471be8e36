"""Evaluation measures over a 4-class confusion matrix."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

NUM_CLASSES = 4


class UndefinedMetricError(ValueError):
    pass


def confusion_matrix(y_true, y_pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Counts[true, predicted] over paired label sequences."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise UndefinedMetricError("label sequences differ in length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0
                        or max(y_true.max(), y_pred.max()) >= num_classes):
        raise UndefinedMetricError(f"labels outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def predictions_from_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve toward the lower class index."""
    return np.argmax(logits, axis=1)


def accuracy(cm: np.ndarray) -> float:
    total = int(cm.sum())
    if total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    return float(np.trace(cm)) / total


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean of per-class F1; a class with P+R = 0 contributes 0."""
    total = int(cm.sum())
    if total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    cm = np.asarray(cm, dtype=np.float64)
    scores = []
    for k in range(cm.shape[0]):
        tp = cm[k, k]
        predicted = cm[:, k].sum()
        actual = cm[k, :].sum()
        precision = tp / predicted if predicted > 0 else 0.0
        recall = tp / actual if actual > 0 else 0.0
        if precision + recall == 0.0:
            scores.append(0.0)
        else:
            scores.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def cohen_kappa(cm: np.ndarray) -> float:
    """(p_o - p_e) / (1 - p_e); perfect agreement at p_e = 1 returns 1."""
    total = int(cm.sum())
    if total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    cm = np.asarray(cm, dtype=np.float64)
    p_o = np.trace(cm) / total
    p_e = float((cm.sum(axis=1) * cm.sum(axis=0)).sum()) / (total * total)
    if p_e >= 1.0:
        if p_o >= 1.0:
            return 1.0
        raise UndefinedMetricError("kappa undefined: chance agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    kappa: float
    confusion: np.ndarray
    n: int

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "MetricsReport":
        return cls(accuracy=accuracy(cm), macro_f1=macro_f1(cm),
                   kappa=cohen_kappa(cm), confusion=np.asarray(cm, dtype=np.int64),
                   n=int(np.sum(cm)))

    def to_json(self) -> str:
        return json.dumps({
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "kappa": self.kappa,
            "n": self.n,
            "confusion": self.confusion.tolist(),
        }, indent=2)

    def csv_fields(self) -> list[str]:
        return [f"{self.accuracy:.6f}", f"{self.macro_f1:.6f}",
                f"{self.kappa:.6f}", str(self.n)]
