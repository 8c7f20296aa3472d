"""Disentanglement correlation and predictive-performance scores."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

SENS_TARGET = 0.8
SPEC_TARGET = 0.8


def pearson_r(a, b) -> float | None:
    """Product-moment correlation; ``None`` when either input has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"pearson_r needs equal-length 1D inputs, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ValueError("pearson_r needs at least two points")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        return None
    r = float(da @ db) / math.sqrt(saa * sbb)
    return max(-1.0, min(1.0, r))


def roc_auc(scores, positive) -> float | None:
    """Mann-Whitney AUC with tie-averaged ranks; ``None`` if only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion_at(scores, positive, threshold: float) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) predicting positive when score >= threshold."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    pred = s >= threshold
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return tp, fp, tn, fn


def _sens(c):
    tp, fp, tn, fn = c
    return tp / (tp + fn)


def _spec(c):
    tp, fp, tn, fn = c
    return tn / (tn + fp)


def f1_from(c) -> float:
    tp, fp, tn, fn = c
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def mcc_from(c) -> float:
    tp, fp, tn, fn = c
    denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return (tp * tn - fp * fn) / denom if denom else 0.0


def threshold_for_sensitivity(scores, positive, target: float = SENS_TARGET) -> float:
    """Largest candidate threshold whose sensitivity is >= target (maximises specificity)."""
    cands = np.unique(np.asarray(scores, dtype=np.float64))[::-1]
    for t in cands:
        if _sens(confusion_at(scores, positive, t)) >= target:
            return float(t)
    return float(cands[-1])


def threshold_for_specificity(scores, positive, target: float = SPEC_TARGET) -> float:
    """Smallest candidate threshold whose specificity is >= target (maximises sensitivity)."""
    cands = np.append(np.unique(np.asarray(scores, dtype=np.float64)), np.inf)
    for t in cands:
        if _spec(confusion_at(scores, positive, t)) >= target:
            return float(t)
    return float(np.inf)


def performance_metrics(p_mean, true_class, positive_class: int = 1) -> dict:
    """AUC, F1, MCC at the 0.8-sensitivity and 0.8-specificity operating points, Sens@Spec, Spec@Sens.

    Scores are the positive-class probability; threshold metrics are ``None``
    when one class is absent.
    """
    p = np.asarray(p_mean, dtype=np.float64)
    scores = p[:, positive_class] if p.ndim == 2 else p
    pos = np.asarray(true_class) == positive_class
    keys = ("auc", "f1", "mcc_sens", "mcc_spec", "sens_at_spec", "spec_at_sens",
            "threshold_sens", "threshold_spec")
    if pos.all() or not pos.any():
        return dict.fromkeys(keys)
    t_sens = threshold_for_sensitivity(scores, pos)
    t_spec = threshold_for_specificity(scores, pos)
    c_sens = confusion_at(scores, pos, t_sens)
    c_spec = confusion_at(scores, pos, t_spec)
    return {
        "auc": roc_auc(scores, pos),
        "f1": f1_from(c_sens),
        "mcc_sens": mcc_from(c_sens),
        "mcc_spec": mcc_from(c_spec),
        "sens_at_spec": _sens(c_spec),
        "spec_at_sens": _spec(c_sens),
        "threshold_sens": t_sens,
        "threshold_spec": t_spec,
    }


def mae(y, y_hat) -> float:
    return float(np.mean(np.abs(np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64))))
