"""Heteroscedastic likelihood objectives.

Regression heads are scored with a Gaussian NLL per target (SBP and DBP summed).
Classification heads predict a Gaussian per logit; the loss is the NLL of the
Monte Carlo averaged softmax, with logits reparameterised as ``f + s * eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor

DEFAULT_T = 100
PROB_FLOOR = 1e-12
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class ClassifierHeadOutput:
    f: Tensor       # (batch, classes) logit means
    sigma2: Tensor  # (batch, classes) logit variances, > 0


@dataclass
class RegressionHeadOutput:
    mu: Tensor      # (batch, 2) [SBP, DBP] mmHg
    sigma2: Tensor  # (batch, 2) mmHg^2, > 0


def split_classifier_output(out: Tensor) -> ClassifierHeadOutput:
    """Raw 4-wide classifier output -> means and variances (variance heads are log-variances)."""
    c = out.shape[1] // 2
    return ClassifierHeadOutput(out[:, :c], T.exp(out[:, c:]))


def split_regression_output(out: Tensor) -> RegressionHeadOutput:
    return RegressionHeadOutput(out[:, :2], out[:, 2:])


def gaussian_nll(mu, sigma2, y, reduction: str = "none") -> Tensor:
    """0.5*ln(2*pi*s2) + (y - mu)^2 / (2*s2), elementwise (or mean/sum reduced)."""
    mu, sigma2, y = T.as_tensor(mu), T.as_tensor(sigma2), T.as_tensor(y)
    if np.any(sigma2.data <= 0):
        raise ValueError("gaussian_nll: sigma2 must be strictly positive")
    loss = 0.5 * T.log(sigma2) + HALF_LOG_2PI + T.square(y - mu) / (2.0 * sigma2)
    return _reduce(loss, reduction)


def _reduce(loss: Tensor, reduction: str) -> Tensor:
    if reduction == "none":
        return loss
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def bp_joint_loss(out: RegressionHeadOutput, y_sbp, y_dbp, reduction: str = "mean") -> Tensor:
    """Sum of the SBP and DBP Gaussian NLLs per example, then reduced over the batch."""
    y_sbp, y_dbp = T.as_tensor(y_sbp), T.as_tensor(y_dbp)
    sbp = gaussian_nll(out.mu[:, 0], out.sigma2[:, 0], y_sbp)
    dbp = gaussian_nll(out.mu[:, 1], out.sigma2[:, 1], y_dbp)
    return _reduce(sbp + dbp, reduction)


def _class_indices(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != n_classes:
            raise ValueError(f"one-hot labels have {labels.shape[1]} columns, expected {n_classes}")
        labels = labels.argmax(axis=1)
    return labels.astype(np.int64)


def draw_logit_noise(batch: int, n_classes: int, T_samples: int, rng: RngStream) -> np.ndarray:
    return rng.normal((batch, T_samples, n_classes))


def mc_softmax_nll(out: ClassifierHeadOutput, labels, T_samples: int = DEFAULT_T, rng: RngStream | None = None,
                   eps: np.ndarray | None = None) -> Tensor:
    """-log of the T-sample averaged softmax at the true class, batch mean.

    Pass ``eps`` of shape (batch, T, classes) to reuse a fixed noise draw.
    """
    if T_samples < 1:
        raise ValueError(f"T must be >= 1, got {T_samples}")
    batch, n_classes = out.f.shape
    idx = _class_indices(labels, n_classes)
    if eps is None:
        if rng is None:
            raise ValueError("mc_softmax_nll needs an RngStream or explicit eps")
        eps = draw_logit_noise(batch, n_classes, T_samples, rng)
    elif eps.shape != (batch, T_samples, n_classes):
        raise T.ShapeError(f"eps shape {eps.shape} != {(batch, T_samples, n_classes)}")
    f = out.f.reshape(batch, 1, n_classes)
    sigma = T.sqrt(out.sigma2).reshape(batch, 1, n_classes)
    x = f + sigma * Tensor(eps)
    p_bar = T.softmax(x, axis=-1).mean(axis=1)
    picked = p_bar[np.arange(batch), idx]
    return -T.log(T.clamp_min(picked, PROB_FLOOR)).mean()


def mc_softmax_probs(f: np.ndarray, sigma2: np.ndarray, T_samples: int, rng: RngStream | None = None,
                     eps: np.ndarray | None = None) -> np.ndarray:
    """Graph-free p_bar of shape (batch, classes); same sampling as :func:`mc_softmax_nll`."""
    f = np.asarray(f, dtype=np.float64)
    sigma = np.sqrt(np.asarray(sigma2, dtype=np.float64))
    batch, n_classes = f.shape
    if eps is None:
        eps = draw_logit_noise(batch, n_classes, T_samples, rng)
    x = f[:, None, :] + sigma[:, None, :] * eps
    x -= x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return (e / e.sum(axis=-1, keepdims=True)).mean(axis=1)
