"""Binary detection metrics.

A score counts as positive when it is >= the threshold. Ranking metrics sweep
every distinct score as a threshold, highest first.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float
    pr_auc: float
    tpr_at_1pct_fpr: float
    fpr_at_95pct_tpr: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_scores: int

    def to_dict(self) -> dict:
        return asdict(self)


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def _need_both(y):
    if y.min() == y.max():
        raise ValueError("both classes must be present")


def confusion_metrics(scores, labels, threshold: float = 0.5) -> dict:
    s, y = _prepare(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": (tp + tn) / len(y), "precision": precision, "recall": recall, "f1": f1,
            "tp": tp, "fp": fp, "tn": tn, "fn": fn}


def _sweep(s, y):
    """Cumulative (tp, fp) at each distinct threshold, descending."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s_sorted) - 1]
    tps = np.cumsum(y_sorted)[last]
    fps = (last + 1) - tps
    return tps, fps


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    s, y = _prepare(scores, labels)
    _need_both(y)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    tps, fps = _sweep(s, y)
    d_tp = np.diff(np.r_[0, tps])
    d_fp = np.diff(np.r_[0, fps])
    fp_before = np.r_[0, fps[:-1]]
    # positives at a threshold beat every negative strictly below it; tie with those at it
    twice_wins = np.sum(d_tp * (2 * (n_neg - fp_before) - d_fp))
    return float(twice_wins) / (2.0 * n_pos * n_neg)


def pr_auc(scores, labels) -> float:
    """Step-wise area: sum over thresholds of (recall gain) x precision."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("no positive labels")
    tps, fps = _sweep(s, y)
    precision = tps / (tps + fps)
    d_recall = np.diff(np.r_[0, tps]) / n_pos
    return float(np.sum(d_recall * precision))


def _rates(s, y):
    _need_both(y)
    tps, fps = _sweep(s, y)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    # include the "nothing positive" operating point
    return np.r_[0, tps] / n_pos, np.r_[0, fps] / n_neg


def tpr_at_fpr(scores, labels, fpr_budget: float = 0.01) -> float:
    """Largest empirical TPR among thresholds with FPR <= budget (no interpolation)."""
    tpr, fpr = _rates(*_prepare(scores, labels))
    return float(tpr[fpr <= fpr_budget].max())


def fpr_at_tpr(scores, labels, tpr_target: float = 0.95) -> float:
    """Smallest empirical FPR among thresholds with TPR >= target."""
    tpr, fpr = _rates(*_prepare(scores, labels))
    return float(fpr[tpr >= tpr_target].min())


def metric_report(scores, labels, threshold: float = 0.5) -> MetricReport:
    c = confusion_metrics(scores, labels, threshold)
    return MetricReport(
        accuracy=c["accuracy"], precision=c["precision"], recall=c["recall"], f1=c["f1"],
        roc_auc=roc_auc(scores, labels), pr_auc=pr_auc(scores, labels),
        tpr_at_1pct_fpr=tpr_at_fpr(scores, labels, 0.01),
        fpr_at_95pct_tpr=fpr_at_tpr(scores, labels, 0.95),
        tp=c["tp"], fp=c["fp"], tn=c["tn"], fn=c["fn"], n_scores=len(np.asarray(scores)),
    )
