"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np


def finite_diff_check(forward, store, h=1e-5, n_coords=40, seed=0, floor=1e-6):
    """Largest relative error between backprop and central differences.

    ``forward`` is a zero-argument callable returning a scalar ``Tensor``
    computed from the parameters in ``store``; it must be deterministic.
    Up to ``n_coords`` coordinates are sampled across all entries. The relative
    error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    store.zero_grad()
    out = forward()
    out.backward()
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for k, t in store.items()}
    store.zero_grad()

    coords = [(k, i) for k, t in store.items() for i in range(t.data.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        picks = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[p] for p in sorted(picks)]

    worst = 0.0
    tensors = dict(store.items())
    for k, i in coords:
        t = tensors[k]
        flat = t.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = float(forward().data)
        flat[i] = orig - h
        fm = float(forward().data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[k].reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
