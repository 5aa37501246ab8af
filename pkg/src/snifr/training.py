"""AdamW optimization, early-stopped epoch loop, k-fold cross-validation.

The optimizer is the decoupled formulation: moments are bias-corrected
and weight decay is applied directly to the parameters, scaled by the
learning rate. Early stopping carves a stratified validation slice off
the training folds (there is no other data to stop on under k-fold
evaluation), monitors macro-F1, and restores the best parameters. When
the carve leaves some class unrepresented, the monitor falls back to
validation loss and the run record carries a warning.

Everything is deterministic for a fixed seed: shuffles, dropout, the
validation carve, and per-fold model seeds all derive from numpy
SeedSequence/PCG64 streams.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from . import models as sm
from .data import ClipRecord, Dataset, FoldPlan, stratified_kfold, split_by_fold
from .models import Batch, Model, ModelConfig


class NonFiniteGradError(FloatingPointError):
    """A NaN/Inf gradient reached the optimizer; the step was aborted."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 25
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    early_stop_patience: int | None = 5    # None disables early stopping
    val_fraction: float = 0.1
    seed: int = 0
    class_weighting: bool = False          # inverse-frequency loss weights
    max_grad_norm: float | None = None     # global-norm clip, off by default

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.val_fraction < 0.5:
            raise ValueError(f"val_fraction must be in [0, 0.5), got {self.val_fraction}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.early_stop_patience}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_model(cls, model: Model) -> "OptimizerState":
        return cls(m={n: np.zeros_like(p.data) for n, p in model.params.items()},
                   v={n: np.zeros_like(p.data) for n, p in model.params.items()})


def adamw_step(params: dict[str, "ad.Tensor"], state: OptimizerState,
               cfg: TrainConfig) -> None:
    """One decoupled-decay update over the whole registry (in place).

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  bias-correct both;
    theta <- theta - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * theta ).
    A parameter untouched by the graph has a zero gradient. Any non-finite
    gradient aborts the step before mutating anything.
    """
    grads: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradError(f"non-finite gradient in {name}")
        grads[name] = g

    if cfg.max_grad_norm is not None:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > cfg.max_grad_norm:
            scale = cfg.max_grad_norm / total
            grads = {n: g * scale for n, g in grads.items()}

    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
                            + cfg.weight_decay * p.data)


@dataclass
class RunRecord:
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    monitor: str = "val_macro_f1"
    warning: str | None = None
    seen_clip_ids: set[int] = field(default_factory=set)

    def to_json_lines(self, lr: float) -> list[str]:
        return [json.dumps({"epoch": e + 1, "train_loss": tl, "val_metric": vm, "lr": lr})
                for e, (tl, vm) in enumerate(zip(self.train_loss, self.val_metric))]


def _stratified_carve(records: list[ClipRecord], fraction: float,
                      rng: np.random.Generator) -> tuple[list[ClipRecord], list[ClipRecord]]:
    """(train, val) split; val takes floor(fraction * n_c) per class."""
    if fraction <= 0:
        return list(records), []
    by_class: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        by_class.setdefault(int(rec.label), []).append(i)
    val_idx: set[int] = set()
    for label in sorted(by_class):
        members = np.array(by_class[label])
        members = members[rng.permutation(len(members))]
        n_val = int(fraction * len(members))
        val_idx.update(int(i) for i in members[:n_val])
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


def _class_weights(records: list[ClipRecord]) -> np.ndarray:
    counts = np.bincount([int(r.label) for r in records], minlength=4)
    weights = np.where(counts > 0, len(records) / np.maximum(counts, 1) / 4.0, 0.0)
    return weights


def _val_score(model: Model, records: list[ClipRecord], monitor: str,
               batch_size: int, class_weights) -> float:
    truth, probs = ev.predict_probs(model, records, batch_size)
    if monitor == "val_macro_f1":
        return ev.macro_f1(probs.argmax(axis=1), truth)
    # val_loss monitor, negated so that higher is always better.
    with np.errstate(divide="ignore"):
        logp = np.log(np.maximum(probs[np.arange(len(truth)), truth], 1e-300))
    if class_weights is None:
        return float(logp.mean())
    w = class_weights[truth]
    return float((w * logp).sum() / w.sum())


def train_fold(model: Model, train_set: list[ClipRecord], cfg: TrainConfig,
               rng: np.random.Generator) -> RunRecord:
    """Fit one model on one training split, early-stopped, best restored."""
    cfg.validate()
    if not train_set:
        raise ValueError("empty training set")
    record = RunRecord(seen_clip_ids={r.clip_id for r in train_set})

    train_records, val_records = _stratified_carve(train_set, cfg.val_fraction, rng)
    val_classes = {int(r.label) for r in val_records}
    train_classes = {int(r.label) for r in train_records}
    if not val_records:
        record.monitor = "none"
        if cfg.val_fraction > 0:
            record.warning = "validation carve came up empty; no early stopping"
    elif val_classes != train_classes:
        record.monitor = "val_loss"
        record.warning = ("validation split is missing classes "
                          f"{sorted(train_classes - val_classes)}; "
                          "falling back to loss-based early stopping")
        warnings.warn(record.warning)

    weights = _class_weights(train_records) if cfg.class_weighting else None
    state = OptimizerState.for_model(model)

    audio = np.stack([r.audio for r in train_records]).astype(np.float64)
    video = np.stack([r.video for r in train_records]).astype(np.float64)
    labels = np.array([int(r.label) for r in train_records], dtype=np.int64)

    best_metric = -np.inf
    best_state: dict[str, np.ndarray] | None = None
    stall = 0
    n = len(train_records)
    for epoch in range(1, cfg.epochs + 1):
        tic = time.monotonic()
        order = rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = Batch(audio=audio[idx], video=video[idx])
            model.zero_grads()
            out = sm.forward(model, batch, mode="train", rng=rng)
            loss = ad.cross_entropy(out.logits, labels[idx], class_weights=weights)
            ad.backward(loss)
            adamw_step(model.params, state, cfg)
            loss_sum += loss.item() * len(idx)
        epoch_loss = loss_sum / n
        if not np.isfinite(epoch_loss):
            raise ad.NonFiniteLossError(f"train loss diverged at epoch {epoch}")
        record.train_loss.append(epoch_loss)

        if record.monitor == "none":
            metric = -epoch_loss
        else:
            metric = _val_score(model, val_records, record.monitor,
                                cfg.batch_size, weights)
        record.val_metric.append(metric)
        record.epoch_seconds.append(time.monotonic() - tic)
        record.stopped_epoch = epoch

        if metric > best_metric:
            best_metric = metric
            best_state = model.state_arrays()
            record.best_epoch = epoch
            stall = 0
        else:
            stall += 1
            if (cfg.early_stop_patience is not None
                    and record.monitor != "none"
                    and stall >= cfg.early_stop_patience):
                break

    if best_state is not None and record.monitor != "none":
        model.load_state_arrays(best_state)
    else:
        record.best_epoch = record.stopped_epoch
    return record


@dataclass
class FoldResult:
    fold: int
    run: RunRecord
    report: ev.EvalReport
    model: Model


def fold_seeds(base_seed: int, fold: int) -> tuple[int, np.random.Generator]:
    """(model seed, training rng) for one fold, derived via SeedSequence."""
    model_seed = int(np.random.SeedSequence(entropy=base_seed,
                                            spawn_key=(fold,)).generate_state(1)[0])
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=base_seed, spawn_key=(fold, 1))))
    return model_seed, rng


def train_eval_fold(dataset: Dataset, plan: FoldPlan, fold: int,
                    model_cfg: ModelConfig, train_cfg: TrainConfig) -> FoldResult:
    """Fresh model on folds != `fold`, evaluated on the held-out fold."""
    model_seed, rng = fold_seeds(train_cfg.seed, fold)
    model = sm.build_model(replace(model_cfg, seed=model_seed))
    train_records, eval_records = split_by_fold(dataset, plan, fold)
    run = train_fold(model, train_records, train_cfg, rng)
    report = ev.evaluate_model(model, eval_records, batch_size=train_cfg.batch_size)
    return FoldResult(fold=fold, run=run, report=report, model=model)


def run_cv(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
           k: int = 5, plan: FoldPlan | None = None) -> list[FoldResult]:
    """k-fold cross-validation; each fold trains a fresh, fold-seeded model."""
    train_cfg.validate()
    if plan is None:
        plan = stratified_kfold(dataset, k, train_cfg.seed)
    return [train_eval_fold(dataset, plan, fold, model_cfg, train_cfg)
            for fold in range(plan.k)]


def mean_report(reports: list[ev.EvalReport]) -> dict:
    """Arithmetic mean over folds; per-class means skip undefined folds."""
    per_class: dict[str, dict | None] = {}
    for label in ev.Label:
        defined = [r.per_class[label] for r in reports if r.per_class[label] is not None]
        if defined:
            per_class[label.name] = {key: float(np.mean([m[key] for m in defined]))
                                     for key in ("acc", "f1", "auc")}
        else:
            per_class[label.name] = None
    totals = {key: float(np.mean([r.totals[key] for r in reports]))
              for key in ("acc", "f1", "auc")}
    confusion = np.sum([r.confusion for r in reports], axis=0)
    return {
        "per_class": per_class,
        "totals": totals,
        "confusion": confusion.tolist(),
        "n_samples": int(sum(r.n_samples for r in reports)),
        "n_folds": len(reports),
    }
