# app/pipeline/scorecard.py
from typing import Dict

import numpy as np

from app.schemas.dataset import N_CLASSES, score_to_class
from app.pipeline.vib import TaskPrediction


def binarize(scores: np.ndarray) -> np.ndarray:
    """1 = positive; a zero score counts positive."""
    return (np.asarray(scores) >= 0).astype(np.int64)


def f1_positive(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def metrics(pred_scores, pred_classes, label_scores, label_classes=None) -> Dict[str, float]:
    """Top-2, Top-7, positive-class F1 and MAE over aligned predictions."""
    pred_scores = np.asarray(pred_scores, dtype=np.float64).reshape(-1)
    pred_classes = np.asarray(pred_classes, dtype=np.int64).reshape(-1)
    label_scores = np.asarray(label_scores, dtype=np.float64).reshape(-1)
    if label_classes is None:
        label_classes = score_to_class(label_scores)
    label_classes = np.asarray(label_classes, dtype=np.int64).reshape(-1)

    n = label_scores.size
    if n == 0:
        raise ValueError("metrics need at least one prediction")
    if not (pred_scores.size == pred_classes.size == label_classes.size == n):
        raise ValueError(
            f"misaligned inputs: {pred_scores.size} scores, {pred_classes.size} classes, "
            f"{n} labels")
    if pred_classes.min() < 0 or pred_classes.max() >= N_CLASSES:
        raise ValueError(f"predicted classes must lie in 0..{N_CLASSES - 1}")

    pred_bin, true_bin = binarize(pred_scores), binarize(label_scores)
    return {
        "top2": float(np.mean(pred_bin == true_bin)),
        "top7": float(np.mean(pred_classes == label_classes)),
        "f1": f1_positive(pred_bin, true_bin),
        "mae": float(np.mean(np.abs(pred_scores - label_scores))),
        "n_samples": int(n),
    }


def prediction_metrics(prediction: TaskPrediction, label_scores, label_classes=None) -> Dict[str, float]:
    return metrics(prediction.score, prediction.label, label_scores, label_classes)
