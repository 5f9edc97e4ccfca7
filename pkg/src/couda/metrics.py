"""Accuracy, macro precision/recall/F1, confusion matrix, noise-layer diagnostic."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: list[ClassMetrics]
    confusion: list[list[int]]
    noise_diag: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_class"] = [ClassMetrics(**c) for c in d["per_class"]]
        return cls(**d)


def confusion_matrix(pred, truth, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if pred.shape != truth.shape:
        raise MetricsError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    for name, v in (("pred", pred), ("truth", truth)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise MetricsError(f"{name} out of range [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def macro_metrics(confusion) -> tuple[float, float, float, list[ClassMetrics]]:
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    precision = _ratio(tp, cm.sum(axis=0))
    recall = _ratio(tp, cm.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    per_class = [
        ClassMetrics(float(p), float(r), float(f), int(s))
        for p, r, f, s in zip(precision, recall, f1, cm.sum(axis=1))
    ]
    return float(precision.mean()), float(recall.mean()), float(f1.mean()), per_class


def report_from_predictions(pred, truth, n_classes: int, noise_diag: float | None = None) -> MetricsReport:
    cm = confusion_matrix(pred, truth, n_classes)
    total = cm.sum()
    acc = float(np.trace(cm) / total) if total else 0.0
    mp, mr, mf, per = macro_metrics(cm)
    return MetricsReport(acc, mp, mr, mf, per, cm.tolist(), noise_diag)


def evaluate(model, dataset, with_noise_diag: bool = True) -> MetricsReport:
    """Score the ensemble prediction (argmax, ties to the lowest index) against clean labels."""
    if dataset.y_clean is None:
        raise MetricsError("dataset has no clean labels to evaluate against")
    if len(dataset) == 0:
        return report_from_predictions([], [], model.n_classes)
    proba = model.ensemble_predict(dataset.x)
    pred = np.argmax(proba, axis=1)
    diag = model.noise_diag(dataset.x) if with_noise_diag else None
    return report_from_predictions(pred, dataset.y_clean, model.n_classes, diag)
