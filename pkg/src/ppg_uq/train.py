"""Training loops: MC-dropout classification (SGD), IVON classification, and
heteroscedastic regression (Adam).

The model state kept for evaluation is the one from the epoch with the lowest
validation loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses as L
from .nn import Module, ParamSet
from .optim import (AdamState, IvonHyper, IvonState, NonFiniteGradientError, SgdState, adam_step, ivon_sample,
                    ivon_step, load_arrays, sgd_step)
from .rng import RngStream
from .synthdata import Dataset, weighted_sampler
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

VAL_BRANCH = 2**40 - 1      # sub-stream index reserved for validation draws


class NonFiniteLossError(FloatingPointError):
    """Training hit a NaN/inf loss or gradient; ``diagnostics`` says where."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainSettings:
    method: str = "mcd"               # "mcd" | "ivon"
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-10
    momentum: float = 0.9
    T: int = L.DEFAULT_T
    J_train: int = 1                  # IVON posterior draws per step
    h0: float = 0.1
    ess: float | None = None          # None -> training-set size
    beta2: float = 0.99999
    clip: float | None = None
    patience: int | None = 10
    weighted_sampling: bool = True
    seed: int = 0
    dropout_seed: int | None = None   # None -> seed

    def __post_init__(self):
        if self.method not in ("mcd", "ivon"):
            raise ValueError(f"method must be 'mcd' or 'ivon', got {self.method!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.T < 1 or self.J_train < 1:
            raise ValueError("epochs, batch_size, T and J_train must all be >= 1")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class TrainResult:
    best_state: ParamSet
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    ivon: IvonState | None = None


def _snapshot(model: Module) -> ParamSet:
    return ParamSet((name, Tensor(t.data.copy())) for name, t in model.state().items())


def param_norms(model: Module) -> dict[str, float]:
    return {name: float(np.linalg.norm(t.data)) for name, t in model.parameters().items()}


def _fail(what: str, epoch: int, batch: int, model: Module) -> NonFiniteLossError:
    diag = {"epoch": epoch, "batch": batch, "param_norms": param_norms(model)}
    return NonFiniteLossError(f"non-finite {what} at epoch {epoch}, batch {batch}", diag)


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def _epoch_order(ds: Dataset, settings: TrainSettings, rng: RngStream) -> np.ndarray:
    if ds.task == "af" and settings.weighted_sampling:
        return weighted_sampler(ds.y, rng)
    return rng.generator.permutation(len(ds))


def _x(ds: Dataset, idx) -> Tensor:
    return Tensor(ds.x[idx][:, None, :])


def classification_loss(model: Module, ds: Dataset, idx, T_samples: int, dropout_rng, noise_rng) -> Tensor:
    out = L.split_classifier_output(model(_x(ds, idx), dropout_rng))
    return L.mc_softmax_nll(out, ds.y[idx], T_samples, noise_rng)


def regression_loss(model: Module, ds: Dataset, idx, dropout_rng=None) -> Tensor:
    out = L.split_regression_output(model(_x(ds, idx), dropout_rng))
    return L.bp_joint_loss(out, ds.y[idx, 0], ds.y[idx, 1])


def validation_loss(model: Module, ds: Dataset, settings: TrainSettings, batch_size: int = 256) -> float:
    """Training objective on the split with fixed randomness.

    Dropout stays active (batchnorm in inference mode) because MC-dropout
    models are only ever used that way; masks and logit noise come from
    seed-derived streams so epochs are comparable.
    """
    was = model.training
    model.eval().set_mc_dropout(True)
    drop_seed = settings.seed if settings.dropout_seed is None else settings.dropout_seed
    masks = RngStream(drop_seed, "dropout").child(VAL_BRANCH)
    noise = RngStream(settings.seed, "logit-noise").child(VAL_BRANCH)
    total = 0.0
    try:
        with no_grad():
            for b, idx in enumerate(_batches(np.arange(len(ds)), batch_size)):
                if ds.task == "af":
                    loss = classification_loss(model, ds, idx, settings.T, masks.child(b), noise.child(b))
                else:
                    loss = regression_loss(model, ds, idx, masks.child(b))
                total += loss.item() * len(idx)
    finally:
        model.set_mc_dropout(False).train(was)
    return total / max(1, len(ds))


def fit(model: Module, train: Dataset, val: Dataset, settings: TrainSettings,
        on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place and leave it holding the best-validation state."""
    if train.task != val.task:
        raise ValueError(f"train/val task mismatch: {train.task} vs {val.task}")
    if settings.method == "ivon" and train.task != "af":
        raise ValueError("IVON training is only supported for the classification task")
    data_rng = RngStream(settings.seed, "data").child(3)
    drop_seed = settings.seed if settings.dropout_seed is None else settings.dropout_seed
    dropout_rng = RngStream(drop_seed, "dropout")
    noise_rng = RngStream(settings.seed, "logit-noise")
    ivon_rng = RngStream(settings.seed, "ivon-sample")
    params = model.parameters()

    ivon = None
    if settings.method == "ivon":
        hyper = IvonHyper(lr=settings.lr, beta1=settings.momentum, beta2=settings.beta2,
                          weight_decay=settings.weight_decay, ess=settings.ess or float(len(train)),
                          h0=settings.h0, clip=settings.clip)
        ivon = IvonState.init(params, hyper)
    elif train.task == "af":
        opt = SgdState(lr=settings.lr, momentum=settings.momentum, weight_decay=settings.weight_decay)
    else:
        opt = AdamState(lr=settings.lr, weight_decay=settings.weight_decay)

    best_loss, best_epoch, best_state, best_ivon = math.inf, 0, _snapshot(model), ivon
    history: list[dict] = []
    stale = 0
    step = 0
    for epoch in range(1, settings.epochs + 1):
        model.train()
        order = _epoch_order(train, settings, data_rng.child(epoch))
        run_loss, seen = 0.0, 0
        for b, idx in enumerate(_batches(order, settings.batch_size)):
            step += 1
            d_rng, n_rng = dropout_rng.child(step), noise_rng.child(step)
            try:
                if ivon is not None:
                    pairs, loss_val = [], 0.0
                    for j in range(settings.J_train):
                        theta = ivon_sample(ivon, ivon_rng.child(step).child(j))
                        load_arrays(params, theta)
                        params.zero_grad()
                        loss = classification_loss(model, train, idx, settings.T, d_rng.child(j), n_rng.child(j))
                        if not math.isfinite(loss.item()):
                            raise _fail("loss", epoch, b, model)
                        loss.backward()
                        pairs.append(([t.grad.copy() for t in params.tensors()], theta))
                        loss_val += loss.item() / settings.J_train
                    ivon = ivon_step(ivon, pairs)
                    load_arrays(params, ivon.m)
                else:
                    params.zero_grad()
                    if train.task == "af":
                        loss = classification_loss(model, train, idx, settings.T, d_rng, n_rng)
                    else:
                        loss = regression_loss(model, train, idx, d_rng)
                    loss_val = loss.item()
                    if not math.isfinite(loss_val):
                        raise _fail("loss", epoch, b, model)
                    loss.backward()
                    if train.task == "af":
                        sgd_step(params, opt)
                    else:
                        adam_step(params, opt)
            except NonFiniteGradientError as exc:
                raise _fail("gradient", epoch, b, model) from exc
            run_loss += loss_val * len(idx)
            seen += len(idx)
        val_loss = validation_loss(model, val, settings)
        if not math.isfinite(val_loss):
            raise _fail("validation loss", epoch, -1, model)
        rec = {"epoch": epoch, "train_loss": run_loss / seen, "val_loss": val_loss}
        history.append(rec)
        log.info("epoch %d train %.5f val %.5f", epoch, rec["train_loss"], val_loss)
        if on_epoch is not None:
            on_epoch(rec)
        if val_loss < best_loss:
            best_loss, best_epoch, best_state, best_ivon, stale = val_loss, epoch, _snapshot(model), ivon, 0
        else:
            stale += 1
            if settings.patience is not None and stale >= settings.patience:
                log.info("early stop after %d epochs without improvement", stale)
                break
    model.load_state(best_state)
    return TrainResult(best_state, best_epoch, history, best_ivon)
