"""Binary classification metrics, ROC/AUC, and Bland-Altman agreement.

Ratio metrics with zero denominators are reported as NaN together with an
explicit flag set, never silently coerced to 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    sensitivity: float
    specificity: float
    undefined: frozenset = frozenset()

    def as_text(self) -> str:
        def fmt(v):
            return "n/a" if math.isnan(v) else f"{v:.4f}"
        lines = [
            "Top-1 Accuracy  " + fmt(self.accuracy),
            "F1 Score        " + fmt(self.f1),
            "AUC             " + fmt(self.auc),
            "Sensitivity     " + fmt(self.sensitivity),
            "Specificity     " + fmt(self.specificity),
            "Precision       " + fmt(self.precision),
            "Recall          " + fmt(self.recall),
        ]
        if self.undefined:
            lines.append("undefined: " + ",".join(sorted(self.undefined)))
        return "\n".join(lines)


def confusion(predictions, labels) -> ConfusionMatrix:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions/labels length mismatch")
    if predictions.size and not (np.isin(predictions, (0, 1)).all()
                                 and np.isin(labels, (0, 1)).all()):
        raise ValueError("binary values expected")
    tp = int(np.sum((predictions == 1) & (labels == 1)))
    tn = int(np.sum((predictions == 0) & (labels == 0)))
    fp = int(np.sum((predictions == 1) & (labels == 0)))
    fn = int(np.sum((predictions == 0) & (labels == 1)))
    return ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by trapezoidal integration over thresholds.

    Tied scores contribute half-concordance (the curve passes through the
    tied block diagonally, which the trapezoid captures exactly).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = int(np.sum(labels == 1))
    neg = int(np.sum(labels == 0))
    if pos == 0 or neg == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # cumulative TP/FP after each distinct-threshold block
    tps = np.cumsum(y == 1)
    fps = np.cumsum(y == 0)
    distinct = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tps[distinct] / pos]
    fpr = np.r_[0.0, fps[distinct] / neg]
    return float(np.trapezoid(tpr, fpr))


def summarize(cm: ConfusionMatrix, scores=None, labels=None) -> MetricsReport:
    """Evaluate the ratio metrics from a confusion matrix (+ AUC if scores).

    Zero-denominator ratios become NaN and are listed in `undefined`.
    """
    undefined = set()

    def ratio(num, den, name):
        if den == 0:
            undefined.add(name)
            return float("nan")
        return num / den

    accuracy = ratio(cm.tp + cm.tn, cm.total, "accuracy")
    precision = ratio(cm.tp, cm.tp + cm.fp, "precision")
    recall = ratio(cm.tp, cm.tp + cm.fn, "recall")
    sensitivity = recall if "recall" not in undefined else ratio(cm.tp, cm.tp + cm.fn, "sensitivity")
    if "recall" in undefined:
        undefined.add("sensitivity")
    specificity = ratio(cm.tn, cm.tn + cm.fp, "specificity")
    if math.isnan(precision) or math.isnan(recall) or (precision + recall) == 0:
        undefined.add("f1")
        f1 = float("nan")
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    if scores is not None and labels is not None:
        auc = roc_auc(scores, labels)
        if math.isnan(auc):
            undefined.add("auc")
    else:
        auc = float("nan")
        undefined.add("auc")
    return MetricsReport(accuracy=accuracy, precision=precision, recall=recall,
                         f1=f1, auc=auc, sensitivity=sensitivity,
                         specificity=specificity, undefined=frozenset(undefined))


def evaluate(predictions, labels, scores=None) -> MetricsReport:
    return summarize(confusion(predictions, labels), scores, labels)


@dataclass(frozen=True)
class BlandAltman:
    mean_diff: float
    min_diff: float
    max_diff: float
    loa_low: float
    loa_high: float
    means: np.ndarray = field(repr=False, default=None)
    diffs: np.ndarray = field(repr=False, default=None)


def bland_altman(acc_a, acc_b) -> BlandAltman:
    """Paired-difference agreement between two accuracy series (a - b)."""
    a = np.asarray(acc_a, dtype=float)
    b = np.asarray(acc_b, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("need equal non-empty lists")
    diffs = a - b
    means = (a + b) / 2.0
    sd = diffs.std(ddof=1) if diffs.size > 1 else 0.0
    m = float(diffs.mean())
    return BlandAltman(mean_diff=m, min_diff=float(diffs.min()),
                       max_diff=float(diffs.max()),
                       loa_low=m - 1.96 * sd, loa_high=m + 1.96 * sd,
                       means=means, diffs=diffs)
