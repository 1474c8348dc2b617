"""Training and evaluation loops for the dual-backbone tagger."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import augment as aug
from . import functional as F
from . import tensor as T
from .data.taxonomy import Taxonomy
from .metrics import MULTILABEL, SINGLE_LABEL, PredictionSet, metric_report
from .model import DualBackboneModel
from .optim import AdamWGC, OptimizerConfig

log = logging.getLogger(__name__)


PARAM_LIMIT = 1e150


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TargetLayout:
    """Column layout of the model outputs: coarse then fine when a taxonomy is
    given (joint training of both granularities), plain classes otherwise."""
    n_classes: int
    task_mode: str = MULTILABEL
    taxonomy: Taxonomy | None = None

    @property
    def n_outputs(self) -> int:
        return self.taxonomy.n_targets if self.taxonomy is not None else self.n_classes

    @property
    def granularities(self) -> tuple[str, ...]:
        return ("coarse", "fine") if self.taxonomy is not None else ("all",)

    def targets(self, fine: np.ndarray) -> np.ndarray:
        fine = np.asarray(fine, dtype=np.float64)
        if self.taxonomy is None:
            return fine
        return np.concatenate([self.taxonomy.coarse_from_fine(fine).astype(np.float64), fine], axis=1)

    def columns(self, granularity: str) -> slice:
        if granularity == "all":
            return slice(0, self.n_classes)
        nc = self.taxonomy.n_coarse
        return slice(0, nc) if granularity == "coarse" else slice(nc, nc + self.taxonomy.n_fine)

    def fine_columns(self) -> slice:
        return self.columns("fine" if self.taxonomy is not None else "all")

    def default_best_metric(self) -> str:
        if self.task_mode == SINGLE_LABEL:
            return "all/accuracy"
        return "coarse/auprc_macro" if self.taxonomy is not None else "all/auprc_macro"


def pad_frames(data: np.ndarray, multiple: int = 4, fill: float = aug.SILENCE) -> np.ndarray:
    """Right-pad the frame axis of [..., frames, mels] with the silence level."""
    frames = data.shape[-2]
    extra = (-frames) % multiple
    if not extra:
        return data
    pad = [(0, 0)] * data.ndim
    pad[-2] = (0, extra)
    return np.pad(data, pad, constant_values=fill)


def evaluate_scores(scores: np.ndarray, targets: np.ndarray, layout: TargetLayout) -> dict[str, float]:
    out = {}
    for gran in layout.granularities:
        cols = layout.columns(gran)
        p = PredictionSet(scores[:, cols], targets[:, cols], layout.task_mode if gran == "all" else MULTILABEL)
        for name, value in metric_report(p).items():
            out[f"{gran}/{name}"] = value
    return out


def evaluate(model: DualBackboneModel, X: np.ndarray, targets: np.ndarray, layout: TargetLayout,
             batch_size: int = 32) -> dict[str, float]:
    return evaluate_scores(model.predict(X, batch_size).clip_probs, targets, layout)


def fine_predictor(model: DualBackboneModel, layout: TargetLayout) -> Callable[[np.ndarray], np.ndarray]:
    cols = layout.fine_columns()
    return lambda x: model.predict(x).clip_probs[:, cols]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    max_steps: int | None = None
    best_metric: str | None = None
    augment: bool = False
    policy: aug.AugmentPolicy = field(default_factory=aug.AugmentPolicy)
    eval_every: int = 1
    eval_train: bool = False


@dataclass
class TrainResult:
    history: list[dict[str, float]]
    best_epoch: int | None
    best_state: dict[str, np.ndarray] | None
    last_state: dict[str, np.ndarray]
    steps: int


def _snapshot(model: DualBackboneModel) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in model.state_dict().items()}


def _augment_batch(xb: np.ndarray, yb: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    policy = cfg.policy
    xb = np.stack([aug.specaugment(x, policy, rng) for x in xb])
    if policy.mixup_enabled and len(xb) > 1:
        partner = rng.permutation(len(xb))
        mixed = [aug.mixup(xb[i], yb[i], xb[j], yb[j], policy.mixup_alpha, rng) for i, j in enumerate(partner)]
        xb = np.stack([m[0] for m in mixed])
        yb = np.stack([m[1] for m in mixed])
    return xb, yb


def train_model(model: DualBackboneModel, X: np.ndarray, Y: np.ndarray, opt_cfg: OptimizerConfig,
                cfg: TrainConfig, layout: TargetLayout, X_val: np.ndarray | None = None,
                Y_val: np.ndarray | None = None,
                stop_when: Callable[[dict[str, float]], bool] | None = None,
                on_epoch: Callable[[dict[str, float]], None] | None = None) -> TrainResult:
    """Mini-batch BCE training on clip-level targets.

    One history row per epoch: mean train loss plus validation metrics
    (``val:`` prefix absent; keys are ``granularity/metric``) and, with
    ``eval_train``, training-set metrics under ``train:``.
    """
    X = pad_frames(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    if X_val is not None:
        X_val = pad_frames(np.asarray(X_val, dtype=np.float64))
    rng = np.random.default_rng(cfg.seed)
    opt = AdamWGC(model.named_parameters(), opt_cfg)
    best_metric = cfg.best_metric or layout.default_best_metric()
    params = model.parameters()
    history: list[dict[str, float]] = []
    best_state, best_epoch, best_value = None, None, -np.inf
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], Y[idx]
            if cfg.augment:
                xb, yb = _augment_batch(xb, yb, cfg, rng)
            try:
                # overflow surfaces as NonFiniteError from the op that produced it
                with np.errstate(over="ignore", invalid="ignore"):
                    _, clip = model(xb)
                    loss = F.bce_loss(clip, yb)
                    T.backward(loss, params)
                    opt.step()
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at step {step + 1}: {exc}") from exc
            bad = next((name for name, p in model.named_parameters()
                        if not np.isfinite(p.data).all() or np.abs(p.data).max(initial=0.0) > PARAM_LIMIT), None)
            if bad is not None:
                raise TrainingDiverged(f"parameter {bad!r} left the finite range at step {step + 1}")
            losses.append(loss.item())
            step += 1
        row: dict[str, float] = {"epoch": epoch + 1, "step": step,
                                 "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            if cfg.eval_train:
                for k, v in evaluate(model, X, Y, layout).items():
                    row[f"train:{k}"] = v
            if X_val is not None:
                row.update(evaluate(model, X_val, Y_val, layout))
                value = row.get(best_metric)
                if value is not None and value > best_value:
                    best_value, best_epoch, best_state = value, epoch + 1, _snapshot(model)
        history.append(row)
        log.info("epoch %d step %d loss %.5f", epoch + 1, step, row["train_loss"])
        if on_epoch is not None:
            on_epoch(row)
        if stop_when is not None and stop_when(row):
            break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return TrainResult(history, best_epoch, best_state, _snapshot(model), step)
