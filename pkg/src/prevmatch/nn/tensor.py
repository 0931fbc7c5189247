"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a numpy array in row-major order.  Operations record their
parents and a closure that pushes the output gradient back to them;
``Tensor.backward`` walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when tensor shapes disagree along a named axis."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: dimension mismatch on axis '{axis}' (expected {expected}, got {got})")


class LabelRangeError(ValueError):
    """Raised when a class id falls outside [0, C)."""

    def __init__(self, coord: tuple, value: int, num_classes: int):
        self.coord = coord
        self.value = value
        super().__init__(f"label {value} at pixel {coord} is outside [0, {num_classes})")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked tensor.

        Gradients add onto whatever is already stored; call ``zero_grad``
        on the leaves to reset.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def relu(self) -> "Tensor":
        return relu(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tensor_sum(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def slice_batch(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along axis 0."""
    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), backward)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


# convolution ----------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[B,Cin,H,W] -> [B*H*W, kh*kw*Cin] patches, zero padded, (i, j, cin) order."""
    b, cin, h, w = x.shape
    t = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    cols = np.concatenate([t[:, i:i + h, j:j + w, :] for i in range(kh) for j in range(kw)], axis=-1)
    return cols.reshape(b * h * w, kh * kw * cin)


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    # [Cout,Cin,kh,kw] -> [Cout, kh*kw*Cin] matching _im2col column order
    return kernel.transpose(0, 2, 3, 1).reshape(kernel.shape[0], -1)


def _conv_from_cols(cols, kernel, bias, b, h, w):
    cout = kernel.shape[0]
    out = cols @ _kernel_matrix(kernel).T + bias
    return np.ascontiguousarray(out.reshape(b, h, w, cout).transpose(0, 3, 1, 2))


def _conv_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, _, h, w = x.shape
    kh, kw = kernel.shape[2:]
    return _conv_from_cols(_im2col(x, kh, kw), kernel, bias, b, h, w)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 2-D cross-correlation: [B,Cin,H,W] * [Cout,Cin,kh,kw] + [Cout]."""
    if x.data.ndim != 4:
        raise DimensionError("conv2d", "input.ndim", 4, x.data.ndim)
    if kernel.data.ndim != 4:
        raise DimensionError("conv2d", "kernel.ndim", 4, kernel.data.ndim)
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError("conv2d", "in_channels", kcin, cin)
    if kh % 2 == 0:
        raise DimensionError("conv2d", "kernel_height(odd)", "odd", kh)
    if kw % 2 == 0:
        raise DimensionError("conv2d", "kernel_width(odd)", "odd", kw)
    if bias.shape != (cout,):
        raise DimensionError("conv2d", "bias", (cout,), bias.shape)
    cols = _im2col(x.data, kh, kw)
    out = _conv_from_cols(cols, kernel.data, bias.data, b, h, w)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient of a stride-1 same conv: correlate with the
            # spatially flipped kernel, in/out channels swapped
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _conv_same(g, flipped, np.zeros(cin))
        return gx, gk, gb

    return _make(out, (x, kernel, bias), backward)


# channel softmax and losses -------------------------------------------------

def _check_bchw(op: str, t: Tensor):
    if t.data.ndim != 4:
        raise DimensionError(op, "ndim", 4, t.data.ndim)


def softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1 of a [B,C,H,W] tensor."""
    _check_bchw("softmax_channels", logits)
    p = softmax_array(logits.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), backward)


def check_labels(targets: np.ndarray, num_classes: int):
    bad = (targets < 0) | (targets >= num_classes)
    if bad.any():
        coord = tuple(int(i) for i in np.argwhere(bad)[0])
        raise LabelRangeError(coord, int(targets[coord]), num_classes)


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean of -log softmax(logits)[target] over pixels where ``mask`` is set.

    ``targets`` and ``mask`` are [B,H,W].  An empty mask yields an exact
    zero loss with zero gradient.
    """
    _check_bchw("masked_cross_entropy", logits)
    b, c, h, w = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (b, h, w):
        raise DimensionError("masked_cross_entropy", "targets", (b, h, w), targets.shape)
    if mask is None:
        mask = np.ones((b, h, w), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (b, h, w):
        raise DimensionError("masked_cross_entropy", "mask", (b, h, w), mask.shape)
    check_labels(targets, c)
    count = int(mask.sum())
    if count == 0:
        return _make(np.array(0.0), (logits,), lambda g: (np.zeros_like(logits.data),))
    logp = log_softmax_array(logits.data)
    picked = np.take_along_axis(logp, targets[:, None].astype(np.intp), axis=1)[:, 0]
    loss = -(picked * mask).sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[:, None].astype(np.intp),
                          np.take_along_axis(grad, targets[:, None].astype(np.intp), axis=1) - 1.0, axis=1)
        return (grad * (mask[:, None] * (g / count)),)

    return _make(np.array(loss), (logits,), backward)


def parameters_zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()
