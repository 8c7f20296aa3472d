"""Central finite-difference helpers shared by the gradient tests."""

from __future__ import annotations

import numpy as np


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_entries(loss_fn, params, n_entries: int, seed: int = 0, step: float = 1e-3):
    """Compare backprop gradients with central differences at ``n_entries`` random coordinates.

    ``loss_fn()`` must rebuild the graph and return a scalar Tensor; ``params``
    is a list of (name, Tensor) pairs.  Returns a list of (name, index, analytic, numeric).
    """
    for _, t in params:
        t.grad = None
    loss_fn().backward()
    gen = np.random.default_rng(seed)
    out = []
    for _ in range(n_entries):
        name, t = params[int(gen.integers(len(params)))]
        idx = tuple(int(gen.integers(s)) for s in t.shape)
        old = t.data[idx]
        t.data[idx] = old + step
        up = loss_fn().item()
        t.data[idx] = old - step
        down = loss_fn().item()
        t.data[idx] = old
        g = 0.0 if t.grad is None else float(t.grad[idx])
        out.append((name, idx, g, (up - down) / (2 * step)))
    return out
