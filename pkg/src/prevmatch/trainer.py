"""Supervised + weak-to-strong + previous-guidance training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .config import TrainConfig
from .data import DatasetSplits, UnlabeledView, apply_geometry, strong_augment, weak_augment
from .metrics import (
    GeneralizationResult,
    MetricsRecord,
    evaluate,
    generalization_delta,
    iou_scores,
    pseudo_counts,
)
from .nn.model import SegModel, forward_array
from .nn.optim import OptimizerState, poly_lr, sgd_step
from .nn.tensor import Tensor, masked_cross_entropy, no_grad, slice_batch, softmax_array
from .registry import GuidanceBatch, PrevRegistry, ensemble_predict, sample_k, sample_weights, select_snapshots

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, step: int, detail: str = ""):
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}{': ' + detail if detail else ''}")


@dataclass(frozen=True)
class LambdaSchedule:
    lambda_max: float = 1.0
    warmup_frac: float = 0.3
    mode: str = "warmup_decay"

    def at(self, epoch: float, total_epochs: int) -> float:
        return lambda_at(self, epoch, total_epochs)


def lambda_at(schedule: LambdaSchedule, epoch: float, total_epochs: int) -> float:
    """Weight of the previous-guidance term at ``epoch`` in [0, total_epochs]."""
    lm = schedule.lambda_max
    if total_epochs <= 0:
        return lm if schedule.mode == "fixed" else 0.0
    t = min(max(epoch, 0), total_epochs)
    if schedule.mode == "fixed":
        return lm
    if schedule.mode == "linear_decay":
        return lm * (1.0 - t / total_epochs)
    if schedule.mode == "linear_increase":
        return lm * (t / total_epochs)
    if schedule.mode == "warmup_decay":
        peak = schedule.warmup_frac * total_epochs
        if t <= peak:
            return lm * (t / peak)
        return lm * ((total_epochs - t) / (total_epochs - peak))
    raise ValueError(f"unknown lambda mode {schedule.mode!r}")


@dataclass
class LossBreakdown:
    l_s: float
    l_u_standard: float
    l_u_prev: float
    lam: float
    total: float
    mask_standard: float
    mask_prev: float
    k_used: int = 0

    def recompose(self) -> float:
        return 0.5 * ((self.l_s + self.l_u_standard) + self.lam * self.l_u_prev)


# losses ---------------------------------------------------------------------

def supervised_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pixel-wise cross-entropy of ``softmax(logits)`` against ground truth, all pixels."""
    if len(labels) == 0:
        raise ValueError("labeled batch is empty")
    return masked_cross_entropy(logits, labels)


def pseudo_targets(probs_w: np.ndarray, tau: float):
    """Argmax pseudo-labels, confidence mask and confidence of a weak prediction."""
    conf = probs_w.max(axis=1)
    return probs_w.argmax(axis=1), conf >= tau, conf


def standard_unsup_loss(logits_s: Tensor, probs_w: np.ndarray, tau: float,
                        mix: np.ndarray | None = None):
    """Masked cross-entropy of the strong prediction against weak pseudo-labels.

    ``probs_w`` is a constant (no gradient flows into the weak branch).
    ``mix`` gives, per sample, the CutMix provenance: a pair
    (partner index array [B], boolean mask [B,H,W]); pseudo-labels and
    confidences are mixed with the identical mask.
    Returns ``(loss, masked-in fraction)``.
    """
    if probs_w.shape != logits_s.shape:
        raise ValueError(f"weak prediction {probs_w.shape} and strong logits {logits_s.shape} are misaligned")
    y, _, conf = pseudo_targets(probs_w, tau)
    y, conf = mix_targets(y, conf, mix)
    mask = conf >= tau
    return masked_cross_entropy(logits_s, y, mask), float(mask.mean())


def prev_unsup_loss(logits_s: Tensor, guidance: GuidanceBatch | None, mix=None):
    """Masked cross-entropy of the strong prediction against previous guidance."""
    if guidance is None:
        return Tensor(0.0), 0.0
    if guidance.probs.shape != logits_s.shape:
        raise ValueError("guidance and strong logits are misaligned")
    y, mask = mix_targets(guidance.pseudo_labels, guidance.mask, mix)
    return masked_cross_entropy(logits_s, y, mask), float(mask.mean())


def mix_targets(y: np.ndarray, conf: np.ndarray, mix):
    if mix is None:
        return y, conf
    partners, masks = mix
    return np.where(masks, y[partners], y), np.where(masks, conf[partners], conf)


# one step -------------------------------------------------------------------

@dataclass
class StepOutput:
    losses: LossBreakdown
    pseudo_labels: np.ndarray  # standard pseudo-labels on the weak views (before mixing)
    pseudo_mask: np.ndarray
    records: list = field(default_factory=list)


def _guidance_k(cfg: TrainConfig, rng: np.random.Generator, available: int) -> int:
    if cfg.random_selection:
        return sample_k(rng, cfg.K, available)
    if cfg.simple_ensemble:
        return min(cfg.K, available)
    return 1


def previous_guidance(cfg: TrainConfig, registry: PrevRegistry, x_w: np.ndarray,
                      rng: np.random.Generator) -> GuidanceBatch | None:
    if not registry.snapshots:
        return None
    k = _guidance_k(cfg, rng, len(registry.snapshots))
    idx = select_snapshots(rng, registry, k)
    w = sample_weights(rng, k, cfg.alpha) if cfg.random_weights else np.full(k, 1.0 / k)
    g = ensemble_predict([registry.snapshots[i] for i in idx], x_w, w, cfg.tau_prev)
    return GuidanceBatch(g.probs, g.pseudo_labels, g.mask, g.k_used, g.weights_used, idx)


def train_step(model: SegModel, opt: OptimizerState, labeled: tuple[np.ndarray, np.ndarray],
               unlabeled: Sequence[np.ndarray], registry: PrevRegistry, cfg: TrainConfig,
               lam: float, lr: float, epoch: int = 0, step: int = 0) -> StepOutput:
    """One optimisation step on a labeled and an unlabeled batch.

    ``labeled`` holds raw (image [B,Cin,H,W], labels [B,H,W]) arrays;
    ``unlabeled`` holds raw images only.  Random draws come from substreams
    named by (epoch, step), so the previous-guidance draws never disturb the
    other flows.
    """
    seed = cfg.seed
    crop = (cfg.crop, cfg.crop)
    r_lab = rngmod.stream(seed, "step", epoch, step, "labeled")
    r_weak = rngmod.stream(seed, "step", epoch, step, "weak")
    r_strong = rngmod.stream(seed, "step", epoch, step, "strong")
    r_prev = rngmod.stream(seed, "step", epoch, step, "prev")

    x_l, y_l = [], []
    for img, lab in zip(*labeled):
        xa, ya, _ = weak_augment(r_lab, img, lab, crop)
        x_l.append(xa)
        y_l.append(ya)
    x_l, y_l = np.stack(x_l), np.stack(y_l)

    records, views = [], []
    for img in unlabeled:
        xw, _, rec = weak_augment(r_weak, img, None, crop)
        views.append(xw)
        records.append(rec)
    x_w = np.stack(views)
    b = len(x_w)
    partners = (np.arange(b) + 1) % b
    strong, masks, any_mix = [], [], False
    params = cfg.strong_params()
    for i in range(b):
        xs, m = strong_augment(r_strong, x_w[i], x_w[partners[i]], cfg.cutmix, params,
                               int(partners[i]), records[i])
        strong.append(xs)
        any_mix |= m is not None
        masks.append(np.zeros(crop, dtype=bool) if m is None else m)
    x_s = np.stack(strong)
    mix = (partners, np.stack(masks)) if any_mix else None

    with no_grad():
        probs_w = softmax_array(model(x_w).data)

    guidance = None
    if cfg.previous_guidance and lam != 0.0:
        guidance = previous_guidance(cfg, registry, x_w, r_prev)

    nl = len(x_l)
    logits = model(np.concatenate([x_l, x_s]))
    logits_l = slice_batch(logits, 0, nl)
    logits_s = slice_batch(logits, nl, nl + b)

    l_s = supervised_loss(logits_l, y_l)
    l_std, frac_std = standard_unsup_loss(logits_s, probs_w, cfg.tau_standard, mix)
    l_prev, frac_prev = prev_unsup_loss(logits_s, guidance, mix)
    total = (l_s + l_std + l_prev * lam) * 0.5

    breakdown = LossBreakdown(l_s.item(), l_std.item(), l_prev.item(), lam, total.item(),
                              frac_std, frac_prev, 0 if guidance is None else guidance.k_used)
    if not math.isfinite(breakdown.total):
        raise TrainingDiverged(epoch, step, f"l_s={breakdown.l_s} l_u_std={breakdown.l_u_standard} "
                                            f"l_u_prev={breakdown.l_u_prev}")
    model.zero_grad()
    total.backward()
    try:
        sgd_step(model, opt, lr)
    except FloatingPointError as exc:
        raise TrainingDiverged(epoch, step, str(exc)) from exc
    y_w, m_w, _ = pseudo_targets(probs_w, cfg.tau_standard)
    return StepOutput(breakdown, y_w, m_w, records)


# epoch loop -----------------------------------------------------------------

@dataclass
class TrainState:
    """Everything needed to continue a run after ``epoch`` completed epochs."""

    model: SegModel
    opt: OptimizerState
    registry: PrevRegistry
    history: list[MetricsRecord]
    epoch: int = 0


@dataclass
class FitResult:
    model: SegModel
    history: list[MetricsRecord]
    registry: PrevRegistry
    test_iou: np.ndarray | None = None
    test_miou: float = math.nan
    generalization: GeneralizationResult | None = None


def steps_per_epoch(cfg: TrainConfig, n_unlabeled: int) -> int:
    full = n_unlabeled // cfg.batch_unlabeled
    return min(full, cfg.steps_per_epoch) if cfg.steps_per_epoch else full


def init_state(cfg: TrainConfig) -> TrainState:
    model = SegModel(cfg.in_channels, cfg.num_classes, cfg.hidden, seed=rngmod.derive_seed(cfg.seed, "model"))
    opt = OptimizerState.for_model(model, cfg.base_lr, cfg.momentum, cfg.poly_power)
    return TrainState(model, opt, PrevRegistry(cfg.N), [], 0)


def _labeled_order(cfg: TrainConfig, epoch: int, n: int, needed: int) -> np.ndarray:
    # labeled data cycles: chain fresh permutations until the epoch is covered
    chunks, have, j = [], 0, 0
    while have < needed:
        chunks.append(rngmod.stream(cfg.seed, "labeled-order", epoch, j).permutation(n))
        have += n
        j += 1
    return np.concatenate(chunks)[:needed]


def model_predictor(model_or_params) -> Callable[[np.ndarray], np.ndarray]:
    params = model_or_params.state() if isinstance(model_or_params, SegModel) else list(model_or_params)
    return lambda x: forward_array(params, x)


def validate_model(model: SegModel, scenes, num_classes: int) -> tuple[np.ndarray, float]:
    return iou_scores(evaluate(model_predictor(model), scenes, num_classes))


def run_epoch(state: TrainState, cfg: TrainConfig, splits: DatasetSplits, epoch: int,
              unlabeled: UnlabeledView | None = None) -> MetricsRecord:
    """Train epoch ``epoch`` (1-based), validate, then offer the model to the registry."""
    unlabeled = unlabeled if unlabeled is not None else splits.unlabeled_view()
    n_u, n_l = len(unlabeled), len(splits.labeled)
    n_steps = steps_per_epoch(cfg, n_u)
    total_iters = n_steps * cfg.epochs
    # effective weight: zero when the flow is off or has no teachers yet
    lam = 0.0
    if cfg.previous_guidance and state.registry.snapshots:
        lam = lambda_at(LambdaSchedule(cfg.lambda_max, cfg.warmup_frac, cfg.lambda_mode), epoch - 1, cfg.epochs)
    u_order = rngmod.stream(cfg.seed, "unlabeled-order", epoch).permutation(n_u)
    l_order = _labeled_order(cfg, epoch, n_l, n_steps * cfg.batch_labeled)
    sums = np.zeros(5)
    correct = np.zeros(cfg.num_classes, dtype=np.int64)
    seen = np.zeros(cfg.num_classes, dtype=np.int64)
    for step in range(n_steps):
        li = l_order[step * cfg.batch_labeled:(step + 1) * cfg.batch_labeled]
        ui = u_order[step * cfg.batch_unlabeled:(step + 1) * cfg.batch_unlabeled]
        labeled = (np.stack([splits.labeled[i].image for i in li]), np.stack([splits.labeled[i].labels for i in li]))
        it = (epoch - 1) * n_steps + step
        out = train_step(state.model, state.opt, labeled, [unlabeled[i] for i in ui], state.registry, cfg,
                         lam, poly_lr(cfg.base_lr, it, total_iters, cfg.poly_power), epoch, step)
        lb = out.losses
        sums += (lb.l_s, lb.l_u_standard, lb.l_u_prev, lb.mask_standard, lb.mask_prev)
        # pseudo-label accuracy reads hidden truth here, outside the loss path
        truth = np.stack([apply_geometry(rec, splits.hidden_truth(i)) for rec, i in zip(out.records, ui)])
        c, t = pseudo_counts(out.pseudo_labels, out.pseudo_mask, truth, cfg.num_classes)
        correct += c
        seen += t
    means = sums / max(n_steps, 1)
    iou, miou = validate_model(state.model, splits.val, cfg.num_classes)
    if cfg.save_criteria == "best":
        state.registry.maybe_save(state.model, epoch, miou)
    else:
        state.registry.save_on_interval(state.model, epoch, cfg.save_interval, miou)
    pacc = np.where(seen > 0, correct / np.maximum(seen, 1), np.nan)
    record = MetricsRecord(epoch, float(means[0]), float(means[1]), float(means[2]), lam, miou,
                           [float(v) for v in iou], [float(v) for v in pacc], float(means[3]), float(means[4]))
    state.history.append(record)
    state.epoch = epoch
    return record


def fit(cfg: TrainConfig, splits: DatasetSplits, state: TrainState | None = None,
        on_epoch_end: Callable[[TrainState], None] | None = None, evaluate_final: bool = True) -> FitResult:
    """Run (or continue) training up to ``cfg.epochs`` and evaluate on the held-out splits."""
    cfg.validate()
    state = state if state is not None else init_state(cfg)
    view = splits.unlabeled_view()
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        rec = run_epoch(state, cfg, splits, epoch, view)
        log.info("epoch %d  l_s=%.4f l_u=%.4f l_prev=%.4f lam=%.3f val_mIoU=%.4f", epoch, rec.l_s,
                 rec.l_u_std, rec.l_u_prev, rec.lam, rec.miou_val)
        if on_epoch_end is not None:
            on_epoch_end(state)
    result = FitResult(state.model, state.history, state.registry)
    if evaluate_final:
        pred = model_predictor(state.model)
        result.generalization = generalization_delta(pred, splits.test, splits.shifted_test, cfg.num_classes)
        result.test_iou = result.generalization.iou_seen
        result.test_miou = result.generalization.miou_seen
    return result
