"""Synthetic segmentation scenes, dataset splits, and augmentation pipelines.

A scene is a background canvas with a few coloured shapes painted on it.
Each foreground class has its own placement rule and sampling weight, so
class imbalance (including one rare class) is controlled directly.  Pixel
features are the class signature plus Gaussian noise, clipped to [-3, 3].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import stream

PLACEMENT_RULES = ("rect", "disk", "stripe", "square")
FEATURE_BOUND = 3.0

DEFAULT_SIGNATURES = (
    (0.0, 0.0, 0.0),
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 1.0),
)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 16
    width: int = 16
    num_classes: int = 5
    in_channels: int = 3
    # one entry per foreground class 1..C-1
    placements: tuple[str, ...] = ("rect", "disk", "stripe", "square")
    class_weights: tuple[float, ...] = (0.35, 0.25, 0.22, 0.18)
    min_shapes: int = 1
    max_shapes: int = 3
    noise: float = 0.6
    signatures: tuple[tuple[float, ...], ...] = DEFAULT_SIGNATURES
    shift_offset: float = 0.4
    shift_weights: tuple[float, ...] | None = (0.25, 0.25, 0.25, 0.25)

    def validate(self):
        if self.height < 8 or self.width < 8:
            raise ValueError(f"scene extent {self.height}x{self.width} too small; need at least 8x8")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        fg = self.num_classes - 1
        if len(self.placements) != fg:
            raise ValueError(f"expected {fg} placement rules, got {len(self.placements)}")
        for rule in self.placements:
            if rule not in PLACEMENT_RULES:
                raise ValueError(f"unknown placement rule {rule!r}")
        for name, weights in (("class_weights", self.class_weights), ("shift_weights", self.shift_weights)):
            if weights is None:
                continue
            if len(weights) != fg:
                raise ValueError(f"{name}: expected {fg} weights, got {len(weights)}")
            if any(w < 0 or not math.isfinite(w) for w in weights):
                raise ValueError(f"{name} must be finite and non-negative")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        sig = np.asarray(self.signatures, dtype=np.float64)
        if sig.shape != (self.num_classes, self.in_channels):
            raise ValueError(f"signatures must have shape {(self.num_classes, self.in_channels)}, got {sig.shape}")
        return self

    def shifted(self) -> "SceneSpec":
        """The test-time domain: feature offset plus altered class weights."""
        weights = self.class_weights if self.shift_weights is None else self.shift_weights
        sig = tuple(tuple(v + self.shift_offset for v in row) for row in self.signatures)
        return replace(self, signatures=sig, class_weights=tuple(weights), shift_offset=0.0)

    @property
    def rare_class(self) -> int:
        """Foreground class with the smallest sampling weight."""
        return 1 + int(np.argmin(self.class_weights))


@dataclass(frozen=True)
class Shape:
    class_id: int
    rule: str
    params: tuple[int, ...]


@dataclass(frozen=True)
class Scene:
    image: np.ndarray  # [in_channels, H, W]
    labels: np.ndarray  # [H, W] int64
    shapes: tuple[Shape, ...] = ()


def _paint(labels: np.ndarray, rule: str, class_id: int, rng: np.random.Generator) -> Shape:
    h, w = labels.shape
    if rule == "rect":
        rh = int(rng.integers(4, h // 2 + 1))
        rw = int(rng.integers(4, w // 2 + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        labels[top:top + rh, left:left + rw] = class_id
        params = (top, left, rh, rw)
    elif rule == "disk":
        r = int(rng.integers(2, max(3, min(h, w) // 4 + 1)))
        cy = int(rng.integers(r, h - r))
        cx = int(rng.integers(r, w - r))
        yy, xx = np.ogrid[:h, :w]
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = class_id
        params = (cy, cx, r)
    elif rule == "stripe":
        thick = int(rng.integers(2, 5))
        vertical = int(rng.integers(0, 2))
        extent = w if vertical else h
        start = int(rng.integers(0, extent - thick + 1))
        if vertical:
            labels[:, start:start + thick] = class_id
        else:
            labels[start:start + thick, :] = class_id
        params = (vertical, start, thick)
    elif rule == "square":
        side = int(rng.integers(3, 5))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        labels[top:top + side, left:left + side] = class_id
        params = (top, left, side)
    else:
        raise ValueError(f"unknown placement rule {rule!r}")
    return Shape(class_id, rule, params)


def generate_scene(rng: np.random.Generator, spec: SceneSpec) -> Scene:
    """Draw one scene; the result is a pure function of the generator state."""
    spec.validate()
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.int64)
    weights = np.asarray(spec.class_weights, dtype=np.float64)
    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shapes = []
    if weights.sum() > 0:
        probs = weights / weights.sum()
        for _ in range(n_shapes):
            cls = 1 + int(rng.choice(len(probs), p=probs))
            shapes.append(_paint(labels, spec.placements[cls - 1], cls, rng))
    sig = np.asarray(spec.signatures, dtype=np.float64)
    image = sig[labels].transpose(2, 0, 1)
    if spec.noise > 0:
        image = image + spec.noise * rng.standard_normal(image.shape)
    image = np.clip(image, -FEATURE_BOUND, FEATURE_BOUND)
    return Scene(np.ascontiguousarray(image), labels, tuple(shapes))


@dataclass(frozen=True)
class SplitCounts:
    labeled: int = 20
    unlabeled: int = 500
    val: int = 50
    test: int = 100
    shifted: int = 100

    def as_tuple(self) -> tuple[int, ...]:
        return (self.labeled, self.unlabeled, self.val, self.test, self.shifted)


SPLIT_NAMES = ("labeled", "unlabeled", "val", "test", "shifted_test")


class UnlabeledView:
    """Images of the unlabeled pool, without their labels."""

    def __init__(self, scenes: list[Scene]):
        self._images = [s.image for s in scenes]

    def __len__(self):
        return len(self._images)

    def __getitem__(self, i: int) -> np.ndarray:
        return self._images[i]


@dataclass
class DatasetSplits:
    labeled: list[Scene]
    unlabeled: list[Scene]
    val: list[Scene]
    test: list[Scene]
    shifted_test: list[Scene]
    seed: int
    spec: SceneSpec
    counts: SplitCounts = field(default_factory=SplitCounts)

    def unlabeled_view(self) -> UnlabeledView:
        """What the training loss path is allowed to see."""
        return UnlabeledView(self.unlabeled)

    def hidden_truth(self, i: int) -> np.ndarray:
        """Ground truth of unlabeled scene ``i``; for pseudo-label metrics only."""
        labels = self.unlabeled[i].labels.view()
        labels.flags.writeable = False
        return labels

    def split(self, name: str) -> list[Scene]:
        return getattr(self, name)


def make_splits(seed: int, counts: SplitCounts, spec: SceneSpec) -> DatasetSplits:
    """Deterministic, index-disjoint splits; ``shifted_test`` uses ``spec.shifted()``."""
    spec.validate()
    sizes = counts.as_tuple()
    if any(n <= 0 for n in sizes):
        raise ValueError(f"split counts must be positive, got {sizes}")
    shifted_spec = spec.shifted()
    out = {}
    base = 0
    for name, n in zip(SPLIT_NAMES, sizes):
        sp = shifted_spec if name == "shifted_test" else spec
        out[name] = [generate_scene(stream(seed, "scene", base + i), sp) for i in range(n)]
        base += n
    return DatasetSplits(seed=seed, spec=spec, counts=counts, **out)


# augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class CutMixBox:
    """A pasted region holding exactly ``area`` pixels.

    The region is ``rows - 1`` full rows of width ``box_w`` starting at
    (top, left) plus a partial last row, so any pixel count is reachable.
    """

    partner: int
    top: int
    left: int
    box_w: int
    area: int
    fraction: float

    def mask(self, h: int, w: int) -> np.ndarray:
        m = np.zeros((h, w), dtype=bool)
        full, rem = divmod(self.area, self.box_w)
        m[self.top:self.top + full, self.left:self.left + self.box_w] = True
        if rem:
            m[self.top + full, self.left:self.left + rem] = True
        return m


@dataclass
class AugRecord:
    flip: bool
    crop: tuple[int, int, int, int]  # top, left, h, w
    gain: tuple[float, ...] | None = None
    bias: tuple[float, ...] | None = None
    grayscale: bool = False
    blur: bool = False
    cutmix: CutMixBox | None = None


def apply_geometry(record: AugRecord, arr: np.ndarray) -> np.ndarray:
    """Flip then crop over the last two axes (works for images and label maps)."""
    if record.flip:
        arr = arr[..., ::-1]
    top, left, h, w = record.crop
    return np.ascontiguousarray(arr[..., top:top + h, left:left + w])


def weak_augment(rng: np.random.Generator, image: np.ndarray, labels: np.ndarray | None = None,
                 crop_size: tuple[int, int] | None = None):
    """Horizontal flip (p=0.5) then a random crop.

    Returns ``(x_w, labels_w, record)``; ``labels_w`` is None when no labels
    were given.
    """
    h, w = image.shape[-2:]
    ch, cw = crop_size if crop_size is not None else (h, w)
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} larger than source {h}x{w}")
    flip = bool(rng.random() < 0.5)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    record = AugRecord(flip=flip, crop=(top, left, ch, cw))
    x = apply_geometry(record, image)
    y = None if labels is None else apply_geometry(record, labels)
    return x, y, record


@dataclass(frozen=True)
class StrongAugParams:
    jitter_prob: float = 0.8
    gain: float = 0.3
    bias: float = 0.3
    grayscale_prob: float = 0.2
    blur_prob: float = 0.2
    cutmix_prob: float = 0.5
    cutmix_area: tuple[float, float] = (0.2, 0.5)

    @classmethod
    def identity(cls) -> "StrongAugParams":
        return cls(jitter_prob=0.0, gain=0.0, bias=0.0, grayscale_prob=0.0, blur_prob=0.0, cutmix_prob=0.0)


def sample_cutmix_box(rng: np.random.Generator, h: int, w: int, area_range: tuple[float, float],
                      partner: int = 0) -> CutMixBox:
    lo, hi = area_range
    frac = float(rng.uniform(lo, hi))
    area = max(1, min(h * w, int(round(frac * h * w))))
    box_w = min(w, max(1, int(round(math.sqrt(area * w / h)))))
    rows = -(-area // box_w)
    if rows > h:
        box_w = -(-area // h)
        rows = -(-area // box_w)
    top = int(rng.integers(0, h - rows + 1))
    left = int(rng.integers(0, w - box_w + 1))
    return CutMixBox(partner, top, left, box_w, area, frac)


def box_blur(image: np.ndarray) -> np.ndarray:
    """3x3 mean filter per channel with edge replication."""
    p = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = image.shape[-2:]
    acc = sum(p[:, i:i + h, j:j + w] for i in range(3) for j in range(3))
    return acc / 9.0


def strong_augment(rng: np.random.Generator, view: np.ndarray, partner: np.ndarray,
                   enable_cutmix: bool = True, params: StrongAugParams = StrongAugParams(),
                   partner_index: int = 0, record: AugRecord | None = None):
    """Strong view built on top of a weak view.

    CutMix (with probability ``params.cutmix_prob``) pastes a region of
    ``partner`` into ``view``; then channel gain/bias jitter, grayscale
    collapse and box blur are applied.  Geometry is never changed, so the
    result stays pixel-aligned with ``view``.  Returns ``(x_s, mask)`` where
    ``mask`` marks pixels taken from the partner, or None.  When ``record``
    is given, the sampled parameters are written into it.
    """
    if view.shape != partner.shape:
        raise ValueError(f"view shape {view.shape} != partner shape {partner.shape}")
    c, h, w = view.shape
    x = view
    mask = None
    box = None
    if enable_cutmix and rng.random() < params.cutmix_prob:
        box = sample_cutmix_box(rng, h, w, params.cutmix_area, partner_index)
        mask = box.mask(h, w)
        x = np.where(mask, partner, view)
    gain = bias = None
    if rng.random() < params.jitter_prob:
        gain = tuple(1.0 + rng.uniform(-params.gain, params.gain, size=c))
        bias = tuple(rng.uniform(-params.bias, params.bias, size=c))
        x = np.clip(x * np.asarray(gain)[:, None, None] + np.asarray(bias)[:, None, None],
                    -FEATURE_BOUND, FEATURE_BOUND)
    gray = bool(rng.random() < params.grayscale_prob)
    if gray:
        x = np.broadcast_to(x.mean(axis=0, keepdims=True), x.shape)
    blur = bool(rng.random() < params.blur_prob)
    if blur:
        x = box_blur(x)
    if record is not None:
        record.gain, record.bias, record.grayscale, record.blur, record.cutmix = gain, bias, gray, blur, box
    return np.ascontiguousarray(x), mask
