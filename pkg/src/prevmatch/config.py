"""Experiment configuration: ``key = value`` text format with typed defaults.

Every key has a default; the effective configuration is echoed in full
with :func:`format_config`, which :func:`parse_config` reads back.
"""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, fields

from .data import SceneSpec, SplitCounts, StrongAugParams

LAMBDA_MODES = ("warmup_decay", "fixed", "linear_decay", "linear_increase")
SAVE_CRITERIA = ("best", "interval")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    # synthetic data
    height: int = 16
    width: int = 16
    num_classes: int = 5
    in_channels: int = 3
    placements: tuple[str, ...] = ("rect", "disk", "stripe", "square")
    class_weights: tuple[float, ...] = (0.35, 0.25, 0.22, 0.18)
    min_shapes: int = 1
    max_shapes: int = 3
    noise: float = 0.6
    shift_offset: float = 0.4
    shift_weights: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    n_labeled: int = 20
    n_unlabeled: int = 500
    n_val: int = 50
    n_test: int = 100
    n_shifted: int = 100
    crop: int = 16
    # model and optimisation
    hidden: tuple[int, ...] = (32, 32, 32)
    epochs: int = 60
    steps_per_epoch: int = 0  # 0 = one pass over the unlabeled pool
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    base_lr: float = 0.01
    momentum: float = 0.9
    poly_power: float = 0.9
    # augmentation
    cutmix: bool = True
    cutmix_prob: float = 0.5
    cutmix_area_min: float = 0.2
    cutmix_area_max: float = 0.5
    jitter_prob: float = 0.8
    jitter_gain: float = 0.3
    jitter_bias: float = 0.3
    grayscale_prob: float = 0.2
    blur_prob: float = 0.2
    # consistency flows
    tau_standard: float = 0.95
    tau_prev: float = 0.9
    N: int = 8
    K: int = 3
    alpha: float = 1.0
    lambda_mode: str = "warmup_decay"
    lambda_max: float = 1.0
    warmup_frac: float = 0.3
    save_criteria: str = "best"
    save_interval: int = 3
    previous_guidance: bool = True
    simple_ensemble: bool = False
    random_selection: bool = True
    random_weights: bool = True
    # reporting
    tail_frac: float = 0.3

    def validate(self) -> "TrainConfig":
        for key in ("tau_standard", "tau_prev", "cutmix_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{key} = {v} must lie in [0, 1]", key)
        if not 0.0 < self.cutmix_area_min <= self.cutmix_area_max <= 1.0:
            raise ConfigError("cutmix area bounds must satisfy 0 < min <= max <= 1", "cutmix_area_min")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in (0, 1)", "warmup_frac")
        if not 0.0 < self.tail_frac <= 1.0:
            raise ConfigError("tail_frac must lie in (0, 1]", "tail_frac")
        for key in ("N", "K", "batch_labeled", "batch_unlabeled", "save_interval",
                    "n_labeled", "n_unlabeled", "n_val", "n_test", "n_shifted"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key)
        for key in ("epochs", "steps_per_epoch", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", key)
        if self.alpha <= 0 or not math.isfinite(self.alpha):
            raise ConfigError("alpha must be positive", "alpha")
        if self.lambda_max < 0:
            raise ConfigError("lambda_max must be >= 0", "lambda_max")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive", "base_lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)", "momentum")
        if self.poly_power <= 0:
            raise ConfigError("poly_power must be positive", "poly_power")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ConfigError(f"lambda_mode must be one of {LAMBDA_MODES}", "lambda_mode")
        if self.save_criteria not in SAVE_CRITERIA:
            raise ConfigError(f"save_criteria must be one of {SAVE_CRITERIA}", "save_criteria")
        if self.random_weights and not (self.random_selection or self.simple_ensemble):
            raise ConfigError("random_weights requires random_selection or simple_ensemble", "random_weights")
        if self.crop > min(self.height, self.width) or self.crop < 1:
            raise ConfigError("crop must fit inside the scene", "crop")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive", "hidden")
        try:
            self.scene_spec().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(height=self.height, width=self.width, num_classes=self.num_classes,
                         in_channels=self.in_channels, placements=self.placements,
                         class_weights=self.class_weights, min_shapes=self.min_shapes,
                         max_shapes=self.max_shapes, noise=self.noise,
                         shift_offset=self.shift_offset, shift_weights=self.shift_weights)

    def split_counts(self) -> SplitCounts:
        return SplitCounts(self.n_labeled, self.n_unlabeled, self.n_val, self.n_test, self.n_shifted)

    def strong_params(self) -> StrongAugParams:
        return StrongAugParams(jitter_prob=self.jitter_prob, gain=self.jitter_gain, bias=self.jitter_bias,
                               grayscale_prob=self.grayscale_prob, blur_prob=self.blur_prob,
                               cutmix_prob=self.cutmix_prob,
                               cutmix_area=(self.cutmix_area_min, self.cutmix_area_max))

    @property
    def is_baseline(self) -> bool:
        return not self.previous_guidance

    @property
    def label(self) -> str:
        if not self.previous_guidance:
            return "baseline"
        parts = ["prevmatch"]
        if self.simple_ensemble:
            parts.append("ensemble")
        if self.random_selection:
            parts.append("rsel")
        if self.random_weights:
            parts.append("rw")
        return "+".join(parts)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_HINTS = typing.get_type_hints(TrainConfig)
FIELD_NAMES = tuple(f.name for f in fields(TrainConfig))


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str):
    """Convert ``text`` to the declared type of config field ``key``."""
    if key not in _HINTS:
        raise ConfigError(f"unknown key {key!r}", key)
    hint = _HINTS[key]
    text = text.strip()
    try:
        if hint is bool:
            return _parse_bool(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        inner = typing.get_args(hint)[0]
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(inner(t) for t in items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})", key) from exc


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw!r}", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"unknown key {key!r}", key, lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", key, lineno)
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(str(exc), key, lineno) from None
    cfg = dataclasses.replace(base or TrainConfig(), **values)
    return cfg.validate()


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def format_config(cfg: TrainConfig) -> str:
    """Every effective value, one ``key = value`` line per field."""
    return "".join(f"{name} = {_format_value(getattr(cfg, name))}\n" for name in FIELD_NAMES)
