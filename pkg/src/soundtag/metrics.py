"""Evaluation metrics: accuracy, micro F1, micro/macro AUPRC and mAP.

Average precision is the step sum over the unique operating points of the
precision-recall curve (no interpolation). An 11-point interpolated mAP is
kept alongside so the two definitions can be compared.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

THRESHOLD = 0.5
MULTILABEL = "multilabel"
SINGLE_LABEL = "single_label"


@dataclass
class PredictionSet:
    scores: np.ndarray
    labels: np.ndarray
    task_mode: str = MULTILABEL

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        if self.scores.shape != self.labels.shape:
            raise ValueError(f"scores {self.scores.shape} and labels {self.labels.shape} differ in shape")
        if self.task_mode not in (MULTILABEL, SINGLE_LABEL):
            raise ValueError(f"unknown task mode {self.task_mode!r}")
        if self.task_mode == SINGLE_LABEL and not np.all(self.labels.sum(axis=1) == 1):
            raise ValueError("single-label rows must contain exactly one positive")


@dataclass
class PRCurve:
    """Operating points at each unique score threshold, highest threshold first."""
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        # (recall 0, precision 1) anchors the curve; it adds no area
        return [(0.0, 1.0)] + list(zip(self.recall.tolist(), self.precision.tolist()))


def pr_curve(scores, labels) -> PRCurve:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    n_pos = labels.sum()
    if n_pos <= 0:
        raise ValueError("precision-recall curve needs at least one positive label")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each group of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    predicted = ends + 1.0
    return PRCurve(s[ends], tp / predicted, tp / n_pos)


def average_precision(curve: PRCurve) -> float:
    recall_prev = np.r_[0.0, curve.recall[:-1]]
    return float(np.sum((curve.recall - recall_prev) * curve.precision))


def interpolated_precision_11(curve: PRCurve) -> float:
    levels = np.arange(11) / 10.0
    total = 0.0
    for r in levels:
        mask = curve.recall >= r - 1e-12
        total += curve.precision[mask].max() if mask.any() else 0.0
    return total / 11.0


def _per_class(p: PredictionSet, fn) -> tuple[list[float], int]:
    values, skipped = [], 0
    for c in range(p.scores.shape[1]):
        if p.labels[:, c].sum() <= 0:
            skipped += 1
            continue
        values.append(fn(p.scores[:, c], p.labels[:, c]))
    if skipped:
        log.warning("%d class(es) without positives excluded from the average", skipped)
    return values, skipped


def per_class_ap(p: PredictionSet) -> dict[int, float]:
    return {c: average_precision(pr_curve(p.scores[:, c], p.labels[:, c]))
            for c in range(p.scores.shape[1]) if p.labels[:, c].sum() > 0}


def auprc_macro(p: PredictionSet) -> float:
    values, _ = _per_class(p, lambda s, y: average_precision(pr_curve(s, y)))
    return float(np.mean(values)) if values else float("nan")


def auprc_micro(p: PredictionSet) -> float:
    return average_precision(pr_curve(p.scores.ravel(), p.labels.ravel()))


def _ap_by_rank(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP as mean precision at each positive's rank; ties share the rank of their group end."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    group_end = np.searchsorted(-s, -s, side="right")  # 1-based rank of the tie-group's last member
    tp_at_end = np.cumsum(y)[group_end - 1]
    return float(np.sum(y * tp_at_end / group_end) / y.sum())


def mean_average_precision(p: PredictionSet) -> float:
    """Unique-point mAP, computed by ranking rather than from the PR curve."""
    values, _ = _per_class(p, _ap_by_rank)
    return float(np.mean(values)) if values else float("nan")


def map_11point(p: PredictionSet) -> float:
    values, _ = _per_class(p, lambda s, y: interpolated_precision_11(pr_curve(s, y)))
    return float(np.mean(values)) if values else float("nan")


def f1_micro(p: PredictionSet, threshold: float = THRESHOLD) -> float:
    pred = p.scores >= threshold
    truth = p.labels > 0.5
    tp = float(np.sum(pred & truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def accuracy(p: PredictionSet) -> float:
    if p.task_mode != SINGLE_LABEL:
        raise ValueError("accuracy is defined for single-label tasks only")
    return float(np.mean(np.argmax(p.scores, axis=1) == np.argmax(p.labels, axis=1)))


METRIC_NAMES = ("accuracy", "f1_micro", "auprc_micro", "auprc_macro", "map", "map_11point")


def metric_report(p: PredictionSet) -> dict[str, float]:
    """Every metric applicable to ``p.task_mode``, keyed by METRIC_NAMES."""
    out = {}
    if p.task_mode == SINGLE_LABEL:
        out["accuracy"] = accuracy(p)
    out["f1_micro"] = f1_micro(p)
    if p.labels.sum() > 0:
        out["auprc_micro"] = auprc_micro(p)
        out["auprc_macro"] = auprc_macro(p)
        out["map"] = mean_average_precision(p)
        out["map_11point"] = map_11point(p)
    return out


def map_auprc_discrepancy(p: PredictionSet) -> dict[str, float]:
    """Side-by-side values of the averaged-precision variants and their gaps."""
    macro, m, m11 = auprc_macro(p), mean_average_precision(p), map_11point(p)
    return {"auprc_macro": macro, "map": m, "map_11point": m11,
            "map_minus_macro": m - macro, "map11_minus_macro": m11 - macro}
