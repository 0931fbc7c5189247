"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-4,
                    floor: float = 1e-6) -> dict[str, float]:
    """Worst relative error per parameter between backward() and finite differences."""
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    out = {}
    for i, (p, a) in enumerate(zip(params, analytic)):
        n = numeric_grad(lambda: loss_fn().item(), p.data, step)
        out[p.name or f"param{i}"] = relative_error(a, n, floor)
    return out
