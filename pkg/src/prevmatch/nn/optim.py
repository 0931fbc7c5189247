from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import SegModel


def poly_lr(base_lr: float, iteration: int, total_iters: int, power: float = 0.9) -> float:
    """Polynomial decay ``base_lr * (1 - iteration / total_iters) ** power``."""
    if total_iters <= 0:
        return 0.0
    if iteration > total_iters:
        warnings.warn(f"poly_lr: iteration {iteration} > total {total_iters}; clamping lr to 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return base_lr * (1.0 - iteration / total_iters) ** power


@dataclass
class OptimizerState:
    """Momentum buffers for SGD, parallel to ``SegModel.parameters()``."""

    base_lr: float = 0.01
    momentum: float = 0.9
    power: float = 0.9
    buffers: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: SegModel, base_lr: float = 0.01, momentum: float = 0.9,
                  power: float = 0.9) -> "OptimizerState":
        if base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if power <= 0:
            raise ValueError("power must be positive")
        return cls(base_lr, momentum, power, [np.zeros_like(p.data) for p in model.parameters()])


def sgd_step(model: SegModel, state: OptimizerState, lr: float):
    """In-place update: v <- m*v + g ; p <- p - lr*v.

    The gradients are read from each parameter's ``.grad`` (missing grad
    counts as zero).  Non-finite gradients abort the step before anything
    is modified.
    """
    params = model.parameters()
    if len(params) != len(state.buffers):
        raise ValueError("optimizer state does not match model parameters")
    grads = []
    for p, v in zip(params, state.buffers):
        if v.shape != p.shape:
            raise ValueError(f"momentum buffer shape {v.shape} != parameter {p.name} {p.shape}")
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name}")
        grads.append(g)
    for i, (p, g) in enumerate(zip(params, grads)):
        state.buffers[i] = state.momentum * state.buffers[i] + g
        p.data = p.data - lr * state.buffers[i]
