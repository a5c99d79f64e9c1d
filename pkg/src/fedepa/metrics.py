"""Overall accuracy, balanced accuracy and macro-F1 from a confusion matrix."""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"confusion_matrix: {y_true.shape} labels vs {y_pred.shape} predictions")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix has negative counts")
    if cm.sum() == 0:
        raise ValueError("confusion matrix is empty")
    return cm


def overall_accuracy(cm) -> float:
    cm = _check(cm)
    return float(np.trace(cm) / cm.sum())


def balanced_accuracy(cm, warn: bool = True) -> float:
    """Mean per-class recall over classes that have true samples."""
    cm = _check(cm)
    support = cm.sum(axis=1)
    present = support > 0
    if not present.all() and warn:
        logger.warning("balanced_accuracy: %d class(es) without true samples excluded", int((~present).sum()))
    recall = np.diag(cm)[present] / support[present]
    return float(recall.mean())


def f1_score(cm) -> float:
    """Macro-F1 over classes that are either present or predicted; 0 where precision + recall = 0."""
    cm = _check(cm)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    active = (support > 0) | (predicted > 0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1[active].mean())


def evaluate(y_true, y_pred, num_classes: int) -> dict[str, float]:
    cm = confusion_matrix(y_true, y_pred, num_classes)
    return {"oa": overall_accuracy(cm), "ba": balanced_accuracy(cm, warn=False), "f1": f1_score(cm)}
