"""Confusion-matrix metrics with equal weight per class."""

from __future__ import annotations

import csv
from collections.abc import Sequence
from pathlib import Path

import numpy as np


class MetricsError(ValueError):
    pass


def confusion(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> np.ndarray:
    """``counts[true, pred]``."""
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape:
        raise MetricsError(f"{len(preds)} predictions vs {len(labels)} labels")
    for name, v in (("prediction", preds), ("label", labels)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise MetricsError(f"{name} out of range [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def per_class_recall(cm: np.ndarray) -> np.ndarray:
    """Recall per class; ``nan`` for classes without true examples."""
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / support, np.nan)


def mc_sensitivity(cm: np.ndarray) -> float:
    """Mean per-class recall over classes that have at least one true example."""
    rec = per_class_recall(cm)
    if np.all(np.isnan(rec)):
        raise MetricsError("confusion matrix has no examples")
    return float(np.nanmean(rec))


def mc_specificity(cm: np.ndarray) -> float:
    """Mean one-vs-rest true-negative rate."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise MetricsError("confusion matrix has no examples")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    neg = tn + fp
    with np.errstate(invalid="ignore", divide="ignore"):
        spec = np.where(neg > 0, tn / neg, np.nan)
    return float(np.nanmean(spec))


def macro_f1(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.sum() == 0:
        raise MetricsError("confusion matrix has no examples")
    tp = np.diag(cm)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        rec = np.where(true_pos > 0, tp / true_pos, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    return float(f1.mean())


def summarize(cm: np.ndarray) -> dict[str, float]:
    return {
        "mc_sensitivity": mc_sensitivity(cm),
        "mc_specificity": mc_specificity(cm),
        "macro_f1": macro_f1(cm),
    }


def metrics_header(class_names: Sequence[str], extra: Sequence[str] = ()) -> list[str]:
    return [
        "run_id",
        *extra,
        "split",
        "mc_sensitivity",
        "mc_specificity",
        "macro_f1",
        *[f"recall_{n}" for n in class_names],
    ]


def metrics_row(run_id: str, split: str, cm: np.ndarray, extra: Sequence = ()) -> list:
    s = summarize(cm)
    recalls = ["" if np.isnan(r) else _fmt(r) for r in per_class_recall(cm)]
    return [run_id, *extra, split, _fmt(s["mc_sensitivity"]), _fmt(s["mc_specificity"]), _fmt(s["macro_f1"]), *recalls]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_rows(path: str | Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
