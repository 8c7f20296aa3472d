"""SGD with momentum, Adam, and IVON.

IVON keeps a diagonal Gaussian posterior N(m, 1/(ess*(h + wd))).  One step
consumes J (gradient, sampled-parameter) pairs drawn at the current state:

    g_hat  = mean_j grad_j
    h_hat  = mean_j grad_j * (theta_j - m) * ess * (h + wd)
    g     <- b1*g + (1-b1)*g_hat
    h     <- b2*h + (1-b2)*h_hat + 0.5*(1-b2)^2 * (h - h_hat)^2 / (h + wd),  floored at 0
    m     <- m - lr * (g/(1-b1^t) + wd*m) / (h + wd)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .nn import ParamSet
from .rng import RngStream


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN/inf; the step was not applied."""


def _check_finite(grads: Sequence[np.ndarray], names: Sequence[str]) -> None:
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}; step rejected")


def _grads_of(params: ParamSet) -> list[np.ndarray]:
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in params.tensors()]


@dataclass
class SgdState:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-10
    velocity: list[np.ndarray] = field(default_factory=list)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def sgd_step(params: ParamSet, state: SgdState, grads: Sequence[np.ndarray] | None = None) -> SgdState:
    """In-place update of ``params``; weight decay enters as ``wd * w`` added to the gradient."""
    grads = _grads_of(params) if grads is None else list(grads)
    _check_finite(grads, params.names())
    if not state.velocity:
        state.velocity = [np.zeros_like(t.data) for t in params.tensors()]
    for t, g, v in zip(params.tensors(), grads, state.velocity):
        d = g + state.weight_decay * t.data
        if state.momentum:
            v *= state.momentum
            v += d
            d = v
        t.data -= (state.lr * d).astype(np.float32)
    return state


def adam_step(params: ParamSet, state: AdamState, grads: Sequence[np.ndarray] | None = None) -> AdamState:
    grads = _grads_of(params) if grads is None else list(grads)
    _check_finite(grads, params.names())
    if not state.m:
        state.m = [np.zeros_like(t.data) for t in params.tensors()]
        state.v = [np.zeros_like(t.data) for t in params.tensors()]
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for t, g, m, v in zip(params.tensors(), grads, state.m, state.v):
        d = g + state.weight_decay * t.data
        m *= state.beta1
        m += (1.0 - state.beta1) * d
        v *= state.beta2
        v += (1.0 - state.beta2) * d * d
        t.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(np.float32)
    return state


@dataclass(frozen=True)
class IvonHyper:
    lr: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.99999
    weight_decay: float = 1e-10
    ess: float = 10_000.0
    h0: float = 0.1
    clip: float | None = None

    def __post_init__(self):
        if self.ess <= 0:
            raise ValueError(f"ess must be positive, got {self.ess}")
        if self.h0 < 0 or self.h0 + self.weight_decay <= 0:
            raise ValueError(f"need h0 >= 0 and h0 + weight_decay > 0, got h0={self.h0}")


@dataclass
class IvonState:
    m: list[np.ndarray]
    h: list[np.ndarray]
    g: list[np.ndarray]
    hyper: IvonHyper
    t: int = 0

    @classmethod
    def init(cls, params: ParamSet | Sequence[np.ndarray], hyper: IvonHyper) -> "IvonState":
        arrays = params.arrays() if isinstance(params, ParamSet) else list(params)
        return cls(
            m=[np.array(a, dtype=np.float64) for a in arrays],
            h=[np.full(np.shape(a), hyper.h0, dtype=np.float64) for a in arrays],
            g=[np.zeros(np.shape(a), dtype=np.float64) for a in arrays],
            hyper=hyper,
        )

    def posterior_std(self) -> list[np.ndarray]:
        hp = self.hyper
        return [1.0 / np.sqrt(hp.ess * (h + hp.weight_decay)) for h in self.h]

    def posterior_var(self) -> list[np.ndarray]:
        hp = self.hyper
        return [1.0 / (hp.ess * (h + hp.weight_decay)) for h in self.h]


def ivon_sample(state: IvonState, rng: RngStream) -> list[np.ndarray]:
    """theta = m + s * eps, s = (ess*(h + wd))^(-1/2), eps ~ N(0, I)."""
    for arr in (*state.m, *state.h):
        if not np.all(np.isfinite(arr)):
            raise ValueError("ivon_sample: non-finite IVON state")
    out = []
    for m, s in zip(state.m, state.posterior_std()):
        eps = rng.generator.standard_normal(m.shape)
        out.append(m + s * eps)
    return out


def ivon_step(state: IvonState, aggregated: Sequence[tuple[Sequence[np.ndarray], Sequence[np.ndarray]]]) -> IvonState:
    """Return the state after one update from J (grads, theta) pairs."""
    if len(aggregated) < 1:
        raise ValueError("ivon_step needs at least one (gradient, theta) pair")
    n = len(state.m)
    for grads, theta in aggregated:
        if len(grads) != n or len(theta) != n:
            raise ValueError(f"ivon_step: expected {n} arrays per gradient/theta, got {len(grads)}/{len(theta)}")
        for name_i, (gi, mi) in enumerate(zip(grads, state.m)):
            if np.shape(gi) != mi.shape:
                raise ValueError(f"ivon_step: gradient {name_i} has shape {np.shape(gi)}, expected {mi.shape}")
        _check_finite([np.asarray(g) for g in grads], [str(i) for i in range(n)])
    hp = state.hyper
    b1, b2, wd = hp.beta1, hp.beta2, hp.weight_decay
    t = state.t + 1
    J = len(aggregated)
    new_m, new_h, new_g = [], [], []
    for i in range(n):
        m, h, g = state.m[i], state.h[i], state.g[i]
        prec = hp.ess * (h + wd)
        g_bar = np.zeros_like(m)
        h_bar = np.zeros_like(m)
        for grads, theta in aggregated:  # fixed ascending-j order
            gj = np.asarray(grads[i], dtype=np.float64)
            g_bar += gj
            h_bar += gj * (np.asarray(theta[i], dtype=np.float64) - m) * prec
        g_bar /= J
        h_bar /= J
        g = b1 * g + (1.0 - b1) * g_bar
        h = b2 * h + (1.0 - b2) * h_bar + 0.5 * (1.0 - b2) ** 2 * (h - h_bar) ** 2 / (h + wd)
        h = np.maximum(h, 0.0)
        delta = (g / (1.0 - b1 ** t) + wd * m) / (h + wd)
        if hp.clip is not None:
            delta = np.clip(delta, -hp.clip, hp.clip)
        new_m.append(m - hp.lr * delta)
        new_h.append(h)
        new_g.append(g)
    return replace(state, m=new_m, h=new_h, g=new_g, t=t)


def load_arrays(params: ParamSet, arrays: Sequence[np.ndarray]) -> None:
    """Copy (sampled or mean) parameter values into the model tensors."""
    for t, a in zip(params.tensors(), arrays):
        np.copyto(t.data, a, casting="unsafe")
