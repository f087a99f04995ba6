"""Thresholded confusion metrics, ROC/AUC, and PR/AUPR.

ROC sweeps the unique scores as thresholds, grouping ties into a single
step, with explicit (0,0) and (1,1) anchors; the area is trapezoidal,
which equals the pairwise concordance probability with ties counted one
half.  The PR area uses the step-wise precision-at-recall-change sum
(trapezoidal PR interpolation is biased, so the oracle tests pin this
convention).  Degenerate 0/0 rates are reported as 0 and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class EvalReport:
    threshold: float = 0.5
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    accuracy: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    specificity: float = 0.0
    ppv: float = 0.0
    npv: float = 0.0
    auc: float = float("nan")
    aupr: float = float("nan")
    roc_points: list = field(default_factory=list)   # (fpr, tpr, threshold)
    pr_points: list = field(default_factory=list)    # (recall, precision, threshold)
    degenerate: list = field(default_factory=list)   # metric names hit by 0/0

    def scalars(self):
        return {
            "threshold": self.threshold,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1,
            "specificity": self.specificity, "ppv": self.ppv, "npv": self.npv,
            "auc": self.auc, "aupr": self.aupr,
            "degenerate": sorted(self.degenerate),
        }


def _check_scored(scores, labels, need_both_classes=False):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size == 0:
        raise ConfigError("empty score set")
    if scores.shape != labels.shape:
        raise ConfigError(f"{scores.size} scores vs {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ConfigError("labels must be 0 or 1")
    if need_both_classes and (labels.min() == labels.max()):
        raise ConfigError("both classes must be present for ranking metrics")
    return scores, labels.astype(np.int64)


def _ratio(num, den, name, degenerate):
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def confusion_metrics(scores, labels, threshold=0.5):
    """Threshold at ``threshold`` (score >= threshold is positive) and fill
    the scalar part of an EvalReport."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    scores, labels = _check_scored(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))

    degenerate = []
    precision = _ratio(tp, tp + fp, "precision", degenerate)
    recall = _ratio(tp, tp + fn, "recall", degenerate)
    specificity = _ratio(tn, tn + fp, "specificity", degenerate)
    npv = _ratio(tn, tn + fn, "npv", degenerate)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", degenerate)
    report = EvalReport(
        threshold=threshold, tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=(tp + tn) / scores.size,
        precision=precision, recall=recall, f1=f1,
        specificity=specificity, ppv=precision, npv=npv,
        degenerate=degenerate,
    )
    return report


@dataclass
class CurveResult:
    points: list
    auc: float


def roc_auc(scores, labels):
    """ROC points (fpr, tpr, threshold) with trapezoidal area."""
    scores, labels = _check_scored(scores, labels, need_both_classes=True)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    auc = 0.0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        fpr, tpr = fp / n_neg, tp / n_pos
        prev_fpr, prev_tpr, _ = points[-1]
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0
        points.append((fpr, tpr, float(s[i])))
        i = j
    return CurveResult(points=points, auc=auc)


def pr_aupr(scores, labels):
    """PR points (recall, precision, threshold); area by precision steps."""
    scores, labels = _check_scored(scores, labels, need_both_classes=True)
    n_pos = int(labels.sum())
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    points = [(0.0, 1.0, float("inf"))]
    tp = fp = 0
    aupr = 0.0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        aupr += (recall - prev_recall) * precision
        points.append((recall, precision, float(s[i])))
        prev_recall = recall
        i = j
    return CurveResult(points=points, auc=aupr)


def build_report(scores, labels, threshold=0.5):
    """Confusion metrics plus both curves in one EvalReport."""
    report = confusion_metrics(scores, labels, threshold)
    roc = roc_auc(scores, labels)
    pr = pr_aupr(scores, labels)
    report.auc = roc.auc
    report.aupr = pr.auc
    report.roc_points = roc.points
    report.pr_points = pr.points
    return report
