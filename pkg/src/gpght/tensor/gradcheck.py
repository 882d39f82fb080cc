"""Central finite-difference gradient checker."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .engine import Tensor, backward, no_grad


def finite_difference_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                            floor: float = 1e-6, max_coords: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward() grads and central differences.

    ``f`` must rebuild its graph from the current values of ``params`` on every
    call.  The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the floor keeps
    coordinates with vanishing gradient from dominating through roundoff.
    ReLU kinks are not handled: keep inputs away from exact zeros.
    With ``max_coords`` only that many randomly chosen coordinates per
    parameter are perturbed.
    """
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data.reshape(-1)[0])
                flat[i] = orig - h
                fm = float(f().data.reshape(-1)[0])
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                denom = max(abs(gflat[i]), abs(numeric), floor)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
