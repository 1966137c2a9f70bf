"""Central finite-difference gradient checks (float64)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


# Central differences at h=1e-5 carry ~1e-10 roundoff on O(1) losses, so
# gradients below this floor are compared in absolute terms.
ZERO_GRAD_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < ZERO_GRAD_FLOOR:
        return float(np.abs(analytic - numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                 coords: np.ndarray | None = None) -> np.ndarray:
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else coords
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn())
        flat[i] = orig - h
        fm = float(fn())
        flat[i] = orig
        out[j] = (fp - fm) / (2 * h)
    return out


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = 64, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backprop and finite differences.

    ``fn`` recomputes a scalar loss from the (mutated in place) ``inputs``;
    all inputs must be float64 and require grad. Large tensors are probed at
    ``max_coords`` random coordinates.
    """
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("gradient checks run at float64")
        x.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for x in inputs:
        analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1)
        coords = None
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        num = numeric_grad(fn, x, h, coords)
        ana = analytic if coords is None else analytic[coords]
        worst = max(worst, relative_error(ana, num))
    return worst
