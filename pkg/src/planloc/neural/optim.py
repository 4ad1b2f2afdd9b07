"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store, state):
    """Apply one update to every trainable entry of ``store`` and clear the gradients.

    Entries with no gradient are treated as having a zero gradient. A
    non-finite gradient aborts the step before any parameter is touched.
    """
    entries = [(k, t) for k, t in store.items() if store.is_trainable(k)]
    for k, t in entries:
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = state.learning_rate
    for k, t in entries:
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        if k not in state.m:
            state.m[k] = np.zeros_like(t.data)
            state.v[k] = np.zeros_like(t.data)
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            t.data = t.data - lr * state.weight_decay * t.data
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.grad = None
    return store, state
