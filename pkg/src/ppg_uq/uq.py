"""Predictive sampling and aleatoric/epistemic disentanglement.

Regression (per head): over K stochastic passes,
    sigma2_epi = population variance of the K means,
    sigma2_ale = mean of the K predicted variances.

Classification: each pass k yields p_bar_k (T-sample logit-noise average);
    H_ale   = mean_k H(p_bar_k)
    H_total = H(mean_k p_bar_k)
    H_epi   = H_total - H_ale
with H(p) = -sum p log2 p.  Entropy concavity guarantees H_ale <= H_total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import DEFAULT_T, mc_softmax_probs
from .nn import Module
from .optim import IvonState, ivon_sample, load_arrays
from .rng import RngStream
from .tensor import Tensor, no_grad

K_CLASSIFICATION = 100
K_REGRESSION = 50
J_EVAL = 100
HEADS = ("sbp", "dbp")


@dataclass
class RegressionUQ:
    mu_mean: np.ndarray       # (N, 2) mmHg
    sigma2_epi: np.ndarray    # (N, 2) mmHg^2
    sigma2_ale: np.ndarray    # (N, 2) mmHg^2
    sigma2_total: np.ndarray  # (N, 2) mmHg^2


@dataclass
class ClassificationUQ:
    p_mean: np.ndarray           # (N, C)
    H_total: np.ndarray          # (N,) bits
    H_ale: np.ndarray            # (N,) bits
    H_epi: np.ndarray            # (N,) bits
    predicted_class: np.ndarray  # (N,)


def entropy_bits(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """-sum p log2 p with 0 log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def disentangle_regression(mu_k: np.ndarray, sigma2_k: np.ndarray) -> RegressionUQ:
    """``mu_k``, ``sigma2_k``: (K, N, heads) stacks of per-pass outputs."""
    mu_k = np.asarray(mu_k, dtype=np.float64)
    sigma2_k = np.asarray(sigma2_k, dtype=np.float64)
    if mu_k.shape != sigma2_k.shape:
        raise ValueError(f"mean stack {mu_k.shape} and variance stack {sigma2_k.shape} differ")
    mu_mean = mu_k.mean(axis=0)
    epi = ((mu_k - mu_mean) ** 2).mean(axis=0)
    ale = sigma2_k.mean(axis=0)
    return RegressionUQ(mu_mean, epi, ale, epi + ale)


def disentangle_classification(p_bar_k: np.ndarray) -> ClassificationUQ:
    """``p_bar_k``: (K, N, C) per-pass averaged class probabilities."""
    p_bar_k = np.asarray(p_bar_k, dtype=np.float64)
    p_mean = p_bar_k.mean(axis=0)
    h_total = entropy_bits(p_mean)
    h_ale = entropy_bits(p_bar_k).mean(axis=0)
    return ClassificationUQ(p_mean, h_total, h_ale, h_total - h_ale, p_mean.argmax(axis=1))


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _as_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return x[:, None, :] if x.ndim == 2 else x


def _forward(model: Module, x: np.ndarray, rng: RngStream | None) -> np.ndarray:
    with no_grad():
        return model(Tensor(x), rng).data


def mcd_eval_regression(model: Module, x: np.ndarray, K: int = K_REGRESSION, rng: RngStream | None = None,
                        batch_size: int = 256) -> RegressionUQ:
    """K dropout-active passes (batchnorm in inference mode)."""
    if K < 2:
        raise ValueError(f"K must be >= 2 for a variance estimate, got {K}")
    outs = mc_passes(model, x, K, rng, batch_size)
    return disentangle_regression(outs[..., :2], outs[..., 2:])


def mc_passes(model: Module, x: np.ndarray, K: int, rng: RngStream | None = None,
              batch_size: int = 256) -> np.ndarray:
    """Raw (K, N, heads) outputs of K dropout-active passes; pass k draws masks from ``rng.child(k)``."""
    x = _as_input(x)
    was_training = model.training
    model.eval().set_mc_dropout(True)
    try:
        outs = []
        for k in range(K):
            pass_rng = rng.child(k) if rng is not None else None
            outs.append(np.concatenate([_forward(model, x[sl], pass_rng) for sl in _batches(len(x), batch_size)]))
    finally:
        model.set_mc_dropout(False).train(was_training)
    return np.stack(outs).astype(np.float64)


def _pbar_from_outputs(out: np.ndarray, T_samples: int, rng: RngStream) -> np.ndarray:
    c = out.shape[1] // 2
    f = out[:, :c].astype(np.float64)
    sigma2 = np.exp(out[:, c:].astype(np.float64))
    return mc_softmax_probs(f, sigma2, T_samples, rng)


def mcd_eval_classification(model: Module, x: np.ndarray, K: int = K_CLASSIFICATION, T_samples: int = DEFAULT_T,
                            rng: RngStream | None = None, noise_rng: RngStream | None = None,
                            batch_size: int = 256) -> ClassificationUQ:
    """K dropout passes, each turned into p_bar_k by T-sample logit-noise averaging."""
    if K < 1 or T_samples < 1:
        raise ValueError(f"need K >= 1 and T >= 1, got K={K}, T={T_samples}")
    if noise_rng is None:
        noise_rng = RngStream(rng.seed if rng is not None else 0, "logit-noise")
    outs = mc_passes(model, x, K, rng, batch_size)
    p_bar_k = np.stack([_pbar_from_outputs(outs[k], T_samples, noise_rng.child(k)) for k in range(K)])
    return disentangle_classification(p_bar_k)


def ivon_eval(model: Module, state: IvonState, x: np.ndarray, J: int = J_EVAL, T_samples: int = DEFAULT_T,
              rng: RngStream | None = None, noise_rng: RngStream | None = None,
              batch_size: int = 256) -> ClassificationUQ:
    """Same aggregation as MC dropout, with K replaced by J posterior parameter draws (dropout off)."""
    if J < 1 or T_samples < 1:
        raise ValueError(f"need J >= 1 and T >= 1, got J={J}, T={T_samples}")
    rng = rng or RngStream(0, "ivon-sample")
    noise_rng = noise_rng or RngStream(rng.seed, "logit-noise")
    x = _as_input(x)
    params = model.parameters()
    saved = [t.data.copy() for t in params.tensors()]
    was_training = model.training
    model.eval().set_mc_dropout(False)
    p_bar_k = []
    try:
        for j in range(J):
            load_arrays(params, ivon_sample(state, rng.child(j)))
            out = np.concatenate([_forward(model, x[sl], None) for sl in _batches(len(x), batch_size)])
            p_bar_k.append(_pbar_from_outputs(out, T_samples, noise_rng.child(j)))
    finally:
        load_arrays(params, saved)
        model.train(was_training)
    return disentangle_classification(np.stack(p_bar_k))


def epistemic_share(record) -> np.ndarray | float | None:
    """Epistemic fraction of total uncertainty; ``None`` (or NaN elementwise) where total is zero."""
    if isinstance(record, RegressionUQ):
        epi, total = record.sigma2_epi, record.sigma2_total
    elif isinstance(record, ClassificationUQ):
        epi, total = record.H_epi, record.H_total
    else:
        epi, total = record
    epi = np.asarray(epi, dtype=np.float64)
    total = np.asarray(total, dtype=np.float64)
    if epi.ndim == 0:
        return None if total <= 0 else float(np.clip(epi / total, 0.0, 1.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(total > 0, epi / np.where(total > 0, total, 1.0), np.nan)
    return np.clip(share, 0.0, 1.0)
