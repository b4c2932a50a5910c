"""SGD with momentum and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class OptimState:
    learning_rate: float = 0.005
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def sgd_momentum_step(params, grads, state, masks=None):
    """In-place update ``v <- momentum * v + g``; ``p <- p - lr * v``.

    ``params`` and ``grads`` are name-keyed dicts of arrays. Entries where a
    boolean ``masks[name]`` is False get no gradient and are kept at zero.
    """
    masks = masks or {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}",
                             g.shape, p.shape)
        m = masks.get(name)
        if m is not None:
            g = g * m
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= state.momentum
        v += g
        p -= state.learning_rate * v
        if m is not None:
            p *= m
    return params


def step_lr(base_lr, epoch, milestones, gamma=0.1):
    """Learning rate after dividing by ``1/gamma`` at each passed milestone epoch."""
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)
