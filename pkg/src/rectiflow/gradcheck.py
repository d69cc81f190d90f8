"""Central finite-difference verification of backpropagated gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .autograd import Tensor


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    eps: float = 1e-5,
) -> float:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the scalar loss from scratch on every call (it is
    re-evaluated twice per parameter entry). Returns the maximum elementwise
    relative error ``|fd - bp| / max(|fd|, |bp|, 1e-6)`` over every entry of
    every parameter.
    """
    params = list(params)
    for _, p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in params}

    worst = 0.0
    for name, p in params:
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            fd[i] = (up - down) / (2.0 * eps)
        bp = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(bp)), 1e-6)
        worst = max(worst, float(np.max(np.abs(fd - bp) / denom)))
    return worst
