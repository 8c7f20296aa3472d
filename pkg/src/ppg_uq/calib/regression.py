"""Regression calibration: ENCE, coverage curve / CCE, bivariate error-vs-uncertainty histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .report import BinStats, CalibrationReport

DEFAULT_ENCE_BINS = 10
DEFAULT_LEVELS = tuple(np.round(np.arange(1, 20) * 0.05, 2))


def equal_population_bins(n: int, n_bins: int) -> list[slice]:
    """Contiguous slices of a sorted array; the first ``n % n_bins`` bins get one extra record."""
    base, rem = divmod(n, n_bins)
    out, start = [], 0
    for j in range(n_bins):
        size = base + (1 if j < rem else 0)
        out.append(slice(start, start + size))
        start += size
    return out


def ence(y, y_hat, sigma2, n_bins: int = DEFAULT_ENCE_BINS) -> CalibrationReport:
    """Expected normalised calibration error over equal-population variance bins.

    Per bin: RMV = sqrt(mean s2), RMSE = sqrt(mean (y - y_hat)^2);
    ENCE = mean over bins of |RMV - RMSE| / RMV.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    if len(y) < n_bins:
        raise ValueError(f"need at least {n_bins} records for {n_bins} bins, got {len(y)}")
    if np.any(sigma2 <= 0):
        raise ValueError("ence: predicted variances must be strictly positive")
    order = np.argsort(sigma2, kind="stable")
    s2, sq = sigma2[order], ((y - y_hat) ** 2)[order]
    curve, terms = [], []
    for j, sl in enumerate(equal_population_bins(len(y), n_bins)):
        rmv = float(np.sqrt(s2[sl].mean()))
        rmse = float(np.sqrt(sq[sl].mean()))
        terms.append(abs(rmv - rmse) / rmv)
        curve.append(BinStats(j, sl.stop - sl.start, float(s2[sl][0]), float(s2[sl][-1]), rmv, rmse))
    return CalibrationReport("ence", float(np.mean(terms)), curve)


def coverage_curve(y, mu, sigma2, levels=DEFAULT_LEVELS) -> CalibrationReport:
    """Fraction of y at or below the p-quantile of N(mu, s2), for each level p.

    ``value`` is the mean squared offset from the diagonal; the summed variant is
    in ``extras['cce_sum']``.
    """
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size == 0:
        raise ValueError("coverage_curve needs at least one level")
    if np.any((levels <= 0) | (levels >= 1)):
        raise ValueError("coverage levels must lie strictly inside (0, 1)")
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("coverage_curve: predicted variances must be strictly positive")
    z = (y - mu) / np.sqrt(sigma2)
    q = norm.ppf(levels)
    cov = (z[None, :] <= q[:, None]).mean(axis=1)
    sq = (cov - levels) ** 2
    curve = [(float(p), float(c)) for p, c in zip(levels, cov)]
    return CalibrationReport("cce", float(sq.mean()), curve,
                             extras={"cce_mean": float(sq.mean()), "cce_sum": float(sq.sum())})


@dataclass
class BivariateHistogram:
    """Counts of (|error|, predicted sigma) pairs.

    Horizontal (error) values outside the edges are clipped into the first/last
    column; vertical values outside the edges land in ``under``/``over``.
    """

    counts: np.ndarray   # (n_x, n_y)
    under: np.ndarray    # (n_x,) sigma below y_edges[0]
    over: np.ndarray     # (n_x,) sigma above y_edges[-1]
    x_edges: np.ndarray
    y_edges: np.ndarray

    def to_dict(self) -> dict:
        return {
            "x_edges": self.x_edges.tolist(),
            "y_edges": self.y_edges.tolist(),
            "counts": self.counts.astype(int).tolist(),
            "under": self.under.astype(int).tolist(),
            "over": self.over.astype(int).tolist(),
        }


def _check_edges(edges, name):
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError(f"{name} must be a strictly increasing list of at least two edges")
    return edges


def _bin_index(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # half-open [e_i, e_{i+1}) except the last bin, which is closed
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[values == edges[-1]] = len(edges) - 2
    return idx


def bivariate_histogram(abs_error, sigma_total, x_edges, y_edges) -> BivariateHistogram:
    x_edges = _check_edges(x_edges, "x_edges")
    y_edges = _check_edges(y_edges, "y_edges")
    ex = np.clip(np.asarray(abs_error, dtype=np.float64), x_edges[0], x_edges[-1])
    sy = np.asarray(sigma_total, dtype=np.float64)
    nx, ny = len(x_edges) - 1, len(y_edges) - 1
    ix = _bin_index(ex, x_edges)
    iy = _bin_index(sy, y_edges)
    counts = np.zeros((nx, ny), dtype=np.int64)
    under = np.zeros(nx, dtype=np.int64)
    over = np.zeros(nx, dtype=np.int64)
    below, above = sy < y_edges[0], sy > y_edges[-1]
    inside = ~(below | above)
    np.add.at(counts, (ix[inside], iy[inside]), 1)
    np.add.at(under, ix[below], 1)
    np.add.at(over, ix[above], 1)
    return BivariateHistogram(counts, under, over, x_edges, y_edges)
