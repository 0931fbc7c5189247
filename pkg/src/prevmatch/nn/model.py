"""Small fully-convolutional per-pixel classifier."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..rng import stream
from .tensor import Tensor, conv2d, relu, softmax_array


class SegModel:
    """Stack of same-padded convolutions with ReLU between them.

    Forward maps [B, in_channels, H, W] to logits [B, num_classes, H, W].
    """

    def __init__(self, in_channels: int, num_classes: int, hidden: Sequence[int] = (32, 32, 32),
                 kernel_size: int = 3, seed: int = 0):
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.hidden = tuple(int(h) for h in hidden)
        self.kernel_size = kernel_size
        rng = stream(seed, "model-init")
        widths = (in_channels, *self.hidden, num_classes)
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            # fan-in scaled uniform init
            bound = np.sqrt(6.0 / (cin * kernel_size * kernel_size))
            w = rng.uniform(-bound, bound, size=(cout, cin, kernel_size, kernel_size))
            self.layers.append((Tensor(w, requires_grad=True, name=f"conv{i}.weight"),
                                Tensor(np.zeros(cout), requires_grad=True, name=f"conv{i}.bias")))

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = conv2d(h, w, b)
            if i < last:
                h = relu(h)
        return h

    __call__ = forward

    def state(self) -> list[np.ndarray]:
        """Copies of the parameter arrays in layer order."""
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise ValueError(f"{p.name}: shape {a.shape} does not match {p.shape}")
            p.data = np.array(a, dtype=np.float64)


def forward_array(params: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Graph-free forward pass over raw parameter arrays (weight, bias, ...)."""
    h = Tensor(x)
    n = len(params) // 2
    for i in range(n):
        h = conv2d(h, Tensor(params[2 * i]), Tensor(params[2 * i + 1]))
        if i < n - 1:
            h = relu(h)
    return h.data


def predict_probs(params: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    return softmax_array(forward_array(params, x))
