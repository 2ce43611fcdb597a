"""Adam optimizer over :class:`~subcam.tensor.Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """Moment accumulators and hyperparameters.

    ``decoupled=False`` folds ``weight_decay * p`` into the gradient before the
    moment update (Adam with L2). ``decoupled=True`` shrinks the parameter by
    ``lr * weight_decay * p`` separately from the adaptive step (AdamW).
    """

    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decoupled: bool = False
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or self.epsilon <= 0:
            raise ValueError("beta1, beta2 must lie in (0, 1) and epsilon must be positive")


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray] | None = None) -> None:
    """Update ``params`` in place. ``grads`` defaults to each tensor's ``.grad``."""
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")

    state.step += 1
    t = state.step
    b1, b2, lr, wd = state.beta1, state.beta2, state.learning_rate, state.weight_decay
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if wd and not state.decoupled:
            g = g + wd * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != p.shape:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        if wd and state.decoupled:
            p.data = p.data - lr * wd * p.data - update
        else:
            p.data = p.data - update
