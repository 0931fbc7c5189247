"""Previous-model list and randomized-ensemble guidance.

The registry keeps at most ``capacity`` parameter snapshots, oldest first.
Guidance for a weak view is produced by picking ``k`` distinct snapshots,
drawing convex weights, and averaging their class probabilities.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn.model import SegModel, predict_probs


class RegistryOrderError(ValueError):
    """An epoch was offered out of order."""


@dataclass(frozen=True)
class Snapshot:
    params: tuple[np.ndarray, ...]
    epoch: int
    val_score: float

    @classmethod
    def capture(cls, model: SegModel, epoch: int, val_score: float) -> "Snapshot":
        arrays = []
        for a in model.state():
            a.flags.writeable = False
            arrays.append(a)
        return cls(tuple(arrays), int(epoch), float(val_score))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.params:
            h.update(str(a.shape).encode())
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities [B,C,H,W] for ``x``; no graph is recorded."""
        return predict_probs(self.params, x)


@dataclass
class PrevRegistry:
    capacity: int = 8
    snapshots: list[Snapshot] = field(default_factory=list)
    best_score: float = -math.inf
    last_epoch: int | None = None

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("registry capacity must be at least 1")

    def __len__(self):
        return len(self.snapshots)

    def _check_epoch(self, epoch: int):
        if self.last_epoch is not None and epoch <= self.last_epoch:
            raise RegistryOrderError(f"epoch {epoch} offered after epoch {self.last_epoch}")
        self.last_epoch = epoch

    def _push(self, snap: Snapshot):
        self.snapshots.append(snap)
        if len(self.snapshots) > self.capacity:
            del self.snapshots[0]

    def maybe_save(self, model: SegModel, epoch: int, val_score: float) -> bool:
        """Save iff ``val_score`` strictly beats every score seen so far."""
        self._check_epoch(epoch)
        if not val_score > self.best_score:
            return False
        self.best_score = float(val_score)
        self._push(Snapshot.capture(model, epoch, val_score))
        return True

    def save_on_interval(self, model: SegModel, epoch: int, interval: int, val_score: float = math.nan) -> bool:
        """Save whenever ``epoch`` is a multiple of ``interval``."""
        if interval < 1:
            raise ValueError("interval must be >= 1")
        self._check_epoch(epoch)
        if val_score > self.best_score:
            self.best_score = float(val_score)
        if epoch % interval != 0:
            return False
        self._push(Snapshot.capture(model, epoch, val_score))
        return True

    def epochs(self) -> list[int]:
        return [s.epoch for s in self.snapshots]


def sample_k(rng: np.random.Generator, K: int, available: int) -> int:
    """Uniform draw from {1, ..., min(K, available)}."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if available < 1:
        raise ValueError("no snapshots available; skip previous guidance for this step")
    return int(rng.integers(1, min(K, available) + 1))


def sample_weights(rng: np.random.Generator, k: int, alpha: float | Sequence[float] = 1.0) -> np.ndarray:
    """Dirichlet(alpha) weights via normalised Gamma(alpha_i, 1) draws."""
    if k < 1:
        raise ValueError("k must be >= 1")
    a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (k,))
    if not np.all(a > 0) or not np.all(np.isfinite(a)):
        raise ValueError(f"Dirichlet concentrations must be positive, got {a.tolist()}")
    if k == 1:
        return np.ones(1)
    g = rng.standard_gamma(a)
    total = g.sum()
    if total <= 0:
        # every draw underflowed (tiny alpha); fall back to a one-hot at a random index
        w = np.zeros(k)
        w[int(rng.integers(k))] = 1.0
        return w
    return g / total


@dataclass(frozen=True)
class GuidanceBatch:
    probs: np.ndarray  # [B,C,H,W]
    pseudo_labels: np.ndarray  # [B,H,W]
    mask: np.ndarray  # [B,H,W] bool
    k_used: int
    weights_used: np.ndarray
    indices: tuple[int, ...] = ()


def ensemble_probs(snapshots: Sequence[Snapshot], x: np.ndarray, weights: Sequence[float]) -> np.ndarray:
    """Weighted sum of snapshot probabilities, accumulated in list order."""
    if len(snapshots) == 0:
        raise ValueError("need at least one snapshot")
    if len(snapshots) != len(weights):
        raise ValueError(f"{len(snapshots)} snapshots but {len(weights)} weights")
    shapes = [tuple(a.shape for a in s.params) for s in snapshots]
    if any(sh != shapes[0] for sh in shapes):
        raise ValueError("snapshot architectures differ")
    if len(snapshots) == 1 and float(weights[0]) == 1.0:
        return snapshots[0].predict(x)
    out = None
    for snap, w in zip(snapshots, weights):
        term = float(w) * snap.predict(x)
        out = term if out is None else out + term
    return out


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Channel argmax over axis 1; ties go to the lowest class id."""
    return probs.argmax(axis=1)


def ensemble_predict(snapshots: Sequence[Snapshot], x: np.ndarray, weights: Sequence[float],
                     tau: float) -> GuidanceBatch:
    probs = ensemble_probs(snapshots, x, weights)
    conf = probs.max(axis=1)
    return GuidanceBatch(probs=probs, pseudo_labels=argmax_lowest(probs), mask=conf >= tau,
                         k_used=len(snapshots), weights_used=np.asarray(weights, dtype=np.float64))


def select_snapshots(rng: np.random.Generator, registry: PrevRegistry, k: int) -> tuple[int, ...]:
    """``k`` distinct list indices, returned in list order."""
    idx = rng.choice(len(registry.snapshots), size=k, replace=False)
    return tuple(sorted(int(i) for i in idx))
