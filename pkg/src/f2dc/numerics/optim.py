"""SGD with heavy-ball momentum and additive weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr", f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", f"must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be nonnegative, got {self.weight_decay}")


def sgd_step(params: Sequence[Tensor], grads: Mapping[Tensor, np.ndarray], state: OptimizerState) -> None:
    """One update: ``g += wd*p; v = momentum*v + g; p -= lr*v``.

    Parameters are rebound to fresh arrays rather than written in place, so
    any array captured earlier (e.g. a broadcast snapshot) stays untouched.
    """
    for p in params:
        g = grads[p]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(id(p))
        if v is None:
            v = g
        else:
            if v.shape != p.shape:
                raise ShapeError(f"velocity {v.shape} does not match parameter {p.shape}")
            v = state.momentum * v + g
        state.velocity[id(p)] = v
        p.data = (p.data - state.lr * v).astype(p.dtype, copy=False)
