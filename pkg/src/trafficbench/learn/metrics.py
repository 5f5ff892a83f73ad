"""Accuracy, macro-F1 and the confusion-matrix based evaluation record."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np


def _classes(y_true: Sequence, y_pred: Sequence, classes: Sequence | None) -> list:
    if classes is not None:
        return list(classes)
    return sorted(set(y_true) | set(y_pred), key=lambda c: (str(type(c)), c))


def confusion_matrix(y_true: Sequence[Hashable], y_pred: Sequence[Hashable], classes: Sequence | None = None) -> tuple[np.ndarray, list]:
    """Rows are true classes, columns predicted classes."""
    if len(y_true) != len(y_pred):
        raise ValueError("y_true and y_pred differ in length")
    cls = _classes(y_true, y_pred, classes)
    pos = {c: i for i, c in enumerate(cls)}
    cm = np.zeros((len(cls), len(cls)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[pos[t], pos[p]] += 1
    return cm, cls


def accuracy(y_true: Sequence, y_pred: Sequence) -> float:
    if len(y_true) != len(y_pred) or len(y_true) == 0:
        raise ValueError("need equal, non-zero lengths")
    return sum(t == p for t, p in zip(y_true, y_pred)) / len(y_true)


def _per_class(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0).astype(np.float64)
    true = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_f1(y_true: Sequence, y_pred: Sequence, classes: Sequence | None = None) -> float:
    """Unweighted mean of per-class F1; a class with no support and no prediction scores 0."""
    if len(y_true) == 0:
        raise ValueError("need at least one sample")
    cm, _ = confusion_matrix(y_true, y_pred, classes)
    return float(_per_class(cm)[2].mean())


@dataclass
class EvalResult:
    accuracy: float
    macro_f1: float
    per_class: dict[str, dict[str, float]]
    confusion: list[list[int]]
    classes: list

    @classmethod
    def from_predictions(cls, y_true: Sequence, y_pred: Sequence, classes: Sequence | None = None) -> EvalResult:
        if len(y_true) == 0:
            raise ValueError("need at least one sample")
        cm, cl = confusion_matrix(y_true, y_pred, classes)
        p, r, f = _per_class(cm)
        support = cm.sum(axis=1)
        per = {str(c): {"precision": float(p[i]), "recall": float(r[i]), "f1": float(f[i]), "support": int(support[i])}
               for i, c in enumerate(cl)}
        acc = float(np.trace(cm) / cm.sum())
        return cls(acc, float(f.mean()), per, cm.tolist(), list(cl))

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "per_class": self.per_class,
                "classes": [str(c) for c in self.classes], "confusion": self.confusion}

    def write_confusion_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred"] + [str(c) for c in self.classes])
            for c, row in zip(self.classes, self.confusion):
                w.writerow([str(c)] + row)


def mean_std(values: Sequence[float]) -> dict[str, float]:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=0)), "n": len(a)}
