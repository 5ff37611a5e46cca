"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_gradient(fn: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``param``'s entries."""
    base = param.data
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    try:
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            orig = bumped[i]
            bumped[i] = orig + step
            param.data = bumped.reshape(base.shape)
            up = fn()
            bumped[i] = orig - step
            param.data = bumped.reshape(base.shape)
            down = fn()
            flat[i] = (up - down) / (2.0 * step)
    finally:
        param.data = base
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n|`` scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be deterministic (fix any noise outside it). Returns the
    relative error per parameter, keyed by name (or position when unnamed).
    """
    grads = backward(loss_fn(), params)
    report = {}
    for i, p in enumerate(params):
        numeric = numerical_gradient(lambda: loss_fn().item(), p, step)
        report[p.name or str(i)] = relative_error(grads[p], numeric)
    return report
