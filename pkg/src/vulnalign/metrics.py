"""Threshold-based metrics for pairwise alignment scores.

Cut points are the observed score values (plus +inf); a pair is predicted
positive when its score is >= the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRAUC_METHOD = "trapezoid over recall, leading (0, first precision) anchor"


class UndefinedMetricError(ValueError):
    pass


@dataclass
class EvalReport:
    precision_at_recall95: float
    f1: float
    selected_threshold: float
    prauc: float
    curve: list = field(default_factory=list)
    n_pos: int = 0
    n_neg: int = 0
    meta: dict = field(default_factory=lambda: {"prauc_method": PRAUC_METHOD})

    def records(self, split="test"):
        return [
            (split, "precision_at_recall95", self.precision_at_recall95),
            (split, "f1", self.f1),
            (split, "threshold", self.selected_threshold),
            (split, "prauc", self.prauc),
            (split, "n_pos", self.n_pos),
            (split, "n_neg", self.n_neg),
        ]


def _arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y


def pr_curve(scores, labels):
    """``(thresholds, precision, recall, tp, fp)`` at every distinct score, descending.

    Precision is ``nan`` where nothing is predicted positive.
    """
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("no positive labels")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp_cum = np.cumsum(y_sorted)
    fp_cum = np.cumsum(1 - y_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    thr = s_sorted[last]
    tp, fp = tp_cum[last].astype(np.float64), fp_cum[last].astype(np.float64)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return thr, precision, recall, tp, fp


def precision_at_recall(scores, labels, target_recall=0.95):
    """Highest precision over thresholds whose recall reaches ``target_recall``.

    Returns ``(precision, threshold)``; ties go to the larger threshold.
    """
    thr, precision, recall, _, _ = pr_curve(scores, labels)
    ok = recall >= target_recall
    best_p, best_t = -1.0, None
    for t, p in zip(thr[ok], precision[ok]):
        if p > best_p:
            best_p, best_t = float(p), float(t)
    if best_t is None:
        raise UndefinedMetricError("target recall not reachable")
    return best_p, best_t


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom > 0 else 0.0


def macro_f1(scores, labels, threshold):
    """Unweighted mean of the positive-class and negative-class F1 at ``threshold``."""
    s, y = _arrays(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return 0.5 * (_f1(tp, fp, fn) + _f1(tn, fn, fp))


def best_macro_f1(scores, labels):
    """``(f1, threshold)`` maximising macro F1 over cut points; ties go to the larger threshold."""
    s, y = _arrays(scores, labels)
    if y.min() == y.max():
        raise UndefinedMetricError("validation labels contain a single class")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    thr, _, _, tp, fp = pr_curve(s, y)
    thr = np.r_[np.inf, thr]
    tp = np.r_[0.0, tp]
    fp = np.r_[0.0, fp]
    fn = n_pos - tp
    tn = n_neg - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        f_pos = np.where(2 * tp + fp + fn > 0, 2 * tp / (2 * tp + fp + fn), 0.0)
        f_neg = np.where(2 * tn + fn + fp > 0, 2 * tn / (2 * tn + fn + fp), 0.0)
    f = 0.5 * (f_pos + f_neg)
    # thresholds run from large to small; first maximum is the largest threshold
    k = int(np.argmax(f))
    return float(f[k]), float(thr[k])


def f1_select_threshold(val_scores, val_labels, test_scores, test_labels):
    """Choose the threshold on validation data, report macro F1 on test data."""
    _, threshold = best_macro_f1(val_scores, val_labels)
    return macro_f1(test_scores, test_labels, threshold), threshold


def prauc(scores, labels):
    """Area under the precision-recall curve by trapezoids over recall."""
    _, precision, recall, _, _ = pr_curve(scores, labels)
    r = np.r_[0.0, recall]
    p = np.r_[precision[0], precision]
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def evaluate(val_scores, val_labels, test_scores, test_labels, target_recall=0.95):
    """Full :class:`EvalReport` on the test split with a validation-chosen F1 threshold."""
    f1, threshold = f1_select_threshold(val_scores, val_labels, test_scores, test_labels)
    p_at_r, _ = precision_at_recall(test_scores, test_labels, target_recall)
    thr, precision, recall, _, _ = pr_curve(test_scores, test_labels)
    y = np.asarray(test_labels)
    return EvalReport(
        precision_at_recall95=p_at_r,
        f1=f1,
        selected_threshold=threshold,
        prauc=prauc(test_scores, test_labels),
        curve=[(float(t), float(p), float(r)) for t, p, r in zip(thr, precision, recall)],
        n_pos=int(y.sum()),
        n_neg=int(y.size - y.sum()),
    )
