"""Classification calibration: ECE, binary UCE and per-class (adaptive) reports."""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from .report import BinStats, CalibrationReport

log = logging.getLogger(__name__)

DEFAULT_BINS = 10
H_TOL = 1e-9


def width_bin_index(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-width bins on [0, 1], right-closed: (lo, hi], with 0 in the first bin."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.searchsorted(edges, values, side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def _check_probs(p_mean: np.ndarray) -> np.ndarray:
    p = np.asarray(p_mean, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValueError(f"probability records must be (N, classes>=2), got shape {p.shape}")
    if np.any(p < -1e-9) or np.any(p > 1 + 1e-9) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability records must be non-negative and sum to 1")
    return p


def _weighted_gap(a: np.ndarray, b: np.ndarray, idx: np.ndarray, n_bins: int, metric: str,
                  target: Callable[[float], float]) -> CalibrationReport:
    n = len(a)
    curve, total = [], 0.0
    width = 1.0 / n_bins
    for m in range(n_bins):
        mask = idx == m
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        mean_a = float(a[mask].mean())
        mean_b = float(b[mask].mean())
        total += cnt / n * abs(mean_b - target(mean_a))
        curve.append(BinStats(m, cnt, m * width, (m + 1) * width, mean_a, mean_b))
    return CalibrationReport(metric, total, curve)


def ece(p_mean, true_class, n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    """sum_m |B_m|/N * |acc(B_m) - conf(B_m)| over equal-width confidence bins (empty bins skipped)."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    p = _check_probs(p_mean)
    y = np.asarray(true_class).astype(np.int64)
    if len(p) == 0:
        return CalibrationReport("ece", None)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    return _weighted_gap(conf, correct, width_bin_index(conf, n_bins), n_bins, "ece", lambda c: c)


def uce(h_total, correct, n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    """Binary uncertainty calibration error: sum_m |B_m|/n * |err(B_m) - uncert(B_m)/2|."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    h = np.asarray(h_total, dtype=np.float64)
    if np.any(h < -H_TOL) or np.any(h > 1.0 + H_TOL):
        raise ValueError("uce: binary-task total entropy must lie in [0, 1] bits")
    if len(h) == 0:
        return CalibrationReport("uce", None)
    h = np.clip(h, 0.0, 1.0)
    err = 1.0 - np.asarray(correct, dtype=np.float64)
    return _weighted_gap(h, err, width_bin_index(h, n_bins), n_bins, "uce", lambda u: u / 2.0)


def ece_global(p_mean, true_class, classes, n_bins: int = DEFAULT_BINS) -> dict:
    """Per-class ECE under global binning: each class's bin weights against the global bin gaps.

    By construction sum_c (N_c/N) * ECE_c == ECE_all.
    """
    p = _check_probs(p_mean)
    y = np.asarray(true_class).astype(np.int64)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    idx = width_bin_index(conf, n_bins)
    gaps = np.zeros(n_bins)
    for m in range(n_bins):
        mask = idx == m
        if mask.any():
            gaps[m] = abs(correct[mask].mean() - conf[mask].mean())
    out = {"all": float((gaps[idx]).mean())}
    for c in classes:
        mask = y == c
        out[str(c)] = float(gaps[idx[mask]].mean()) if mask.any() else None
    return out


def per_class_reports(true_class, metric: Callable[..., CalibrationReport], *columns,
                      classes=None, labels: dict | None = None, **kwargs) -> list[CalibrationReport]:
    """Evaluate ``metric`` over all records and separately within each ground-truth class.

    ``columns`` are the metric's per-record arrays (partitioned row-wise);
    empty partitions are omitted from the result (absent, not zero).
    """
    y = np.asarray(true_class).astype(np.int64)
    classes = sorted(set(y.tolist())) if classes is None else list(classes)
    labels = labels or {}
    reports = []
    total = metric(*columns, **kwargs)
    total.class_scope = "all"
    reports.append(total)
    for c in classes:
        mask = y == c
        scope = labels.get(c, str(c))
        if not mask.any():
            log.warning("class %s has no records; per-class %s omitted", scope, total.metric)
            continue
        rep = metric(*(np.asarray(col)[mask] for col in columns), **kwargs)
        rep.class_scope = scope
        reports.append(rep)
    return reports
