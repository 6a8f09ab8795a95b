"""Slide-level classification metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Mapping, Sequence

import numpy as np
from sklearn.metrics import accuracy_score, precision_recall_fscore_support

from .errors import DataError
from .mil import SlidePrediction

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def classification_metrics(y_true: Sequence[int], y_pred: Sequence[int]) -> Metrics:
    """Accuracy plus macro precision/recall/F1 over the classes seen in either vector.

    Classes with no predicted (or no true) member score 0 for the undefined ratio.
    """

    truth = np.asarray(y_true, dtype=np.int64)
    predicted = np.asarray(y_pred, dtype=np.int64)
    if truth.size == 0 or truth.shape != predicted.shape:
        raise DataError(f"need aligned, non-empty label vectors (got {truth.shape} and {predicted.shape})")
    precision, recall, f1, _ = precision_recall_fscore_support(truth, predicted, average="macro", zero_division=0)
    return Metrics(
        accuracy=float(accuracy_score(truth, predicted)),
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
    )


def evaluate(predictions: Sequence[SlidePrediction], truth: Mapping[str, int]) -> Metrics:
    unknown = [p.slide_id for p in predictions if p.slide_id not in truth]
    if unknown:
        raise DataError(f"predictions for unknown slide ids: {unknown}")
    return classification_metrics([truth[p.slide_id] for p in predictions], [p.final_label for p in predictions])


def mean_metrics(runs: Iterable[Metrics]) -> Metrics:
    rows = list(runs)
    if not rows:
        raise DataError("no runs to average")
    return Metrics(**{name: float(np.mean([getattr(run, name) for run in rows])) for name in METRIC_NAMES})


__all__ = ["METRIC_NAMES", "Metrics", "classification_metrics", "evaluate", "mean_metrics"]
