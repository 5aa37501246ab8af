"""Metric surface: confusion matrix, per-class recall/F1/AUC, totals.

Per-class "accuracy" is recall (diagonal over row sum). AUC is one-vs-rest,
computed from the Mann-Whitney rank statistic with ties counted half.
All metrics live in [0, 1] internally; rendering multiplies by 100.
Classes absent from the truth get None metrics and are excluded from
totals (with a warning) rather than imputed as zero.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Label

N_CLASSES = 4


def confusion_matrix(preds, truth) -> np.ndarray:
    """4x4 count matrix, rows = true class, cols = predicted class."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {truth.shape}")
    if preds.size == 0:
        raise ValueError("need at least one prediction")
    m = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(m, (truth, preds), 1)
    return m


def _tie_averaged_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with equal scores sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc_ovr(scores: np.ndarray, positives: np.ndarray) -> float:
    """One-vs-rest ROC AUC from the rank statistic; ties count half."""
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positives and negatives")
    ranks = _tie_averaged_ranks(np.asarray(scores, dtype=np.float64))
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_metrics(confusion: np.ndarray, scores: np.ndarray, truth) -> dict[Label, dict | None]:
    """Recall ("acc"), F1, and one-vs-rest AUC per class.

    `scores` are class probabilities, one row per sample. A class absent
    from the truth gets None and a warning.
    """
    truth = np.asarray(truth, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(truth), N_CLASSES):
        raise ValueError(f"scores must be [n x {N_CLASSES}], got {scores.shape}")
    out: dict[Label, dict | None] = {}
    for c in range(N_CLASSES):
        row_sum = int(confusion[c].sum())
        if row_sum == 0:
            warnings.warn(f"class {Label(c).name} absent from truth; metrics undefined")
            out[Label(c)] = None
            continue
        tp = int(confusion[c, c])
        col_sum = int(confusion[:, c].sum())
        recall = tp / row_sum
        precision = tp / col_sum if col_sum > 0 else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        auc = roc_auc_ovr(scores[:, c], truth == c)
        out[Label(c)] = {"acc": recall, "f1": f1, "auc": auc}
    return out


def macro_f1(preds, truth) -> float:
    """Mean per-class F1 over the classes present in the truth."""
    m = confusion_matrix(preds, truth)
    values = []
    for c in range(N_CLASSES):
        row_sum, col_sum, tp = int(m[c].sum()), int(m[:, c].sum()), int(m[c, c])
        if row_sum == 0:
            continue
        recall = tp / row_sum
        precision = tp / col_sum if col_sum > 0 else 0.0
        values.append(2 * precision * recall / (precision + recall)
                      if precision + recall > 0 else 0.0)
    if not values:
        raise ValueError("no class present in truth")
    return float(np.mean(values))


def aggregate_totals(per_class: dict[Label, dict | None]) -> dict[str, float]:
    """Unweighted mean of each metric over the defined classes."""
    defined = [m for m in per_class.values() if m is not None]
    if not defined:
        raise ValueError("no class has defined metrics")
    return {key: float(np.mean([m[key] for m in defined]))
            for key in ("acc", "f1", "auc")}


@dataclass
class EvalReport:
    confusion: np.ndarray
    per_class: dict[Label, dict | None]
    totals: dict[str, float]
    n_samples: int
    undefined_classes: list[Label] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class": {
                label.name: metrics
                for label, metrics in self.per_class.items()
            },
            "totals": self.totals,
            "n_samples": self.n_samples,
            "undefined_classes": [lab.name for lab in self.undefined_classes],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalReport":
        per_class = {Label[name]: metrics for name, metrics in payload["per_class"].items()}
        return cls(
            confusion=np.asarray(payload["confusion"], dtype=np.int64),
            per_class=per_class,
            totals=dict(payload["totals"]),
            n_samples=int(payload["n_samples"]),
            undefined_classes=[Label[name] for name in payload.get("undefined_classes", [])],
        )


def evaluate_predictions(truth, preds, scores: np.ndarray) -> EvalReport:
    """Assemble the full report from raw labels, argmax picks, and scores."""
    confusion = confusion_matrix(preds, truth)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        per_class = per_class_metrics(confusion, scores, truth)
    undefined = [lab for lab, m in per_class.items() if m is None]
    if undefined:
        warnings.warn("classes absent from evaluation truth: "
                      + ", ".join(lab.name for lab in undefined))
    totals = aggregate_totals(per_class)
    return EvalReport(confusion=confusion, per_class=per_class, totals=totals,
                      n_samples=len(np.asarray(truth)), undefined_classes=undefined)


def evaluate_model(model, records, batch_size: int = 64) -> EvalReport:
    """Eval-mode forward over a record list, then the metric stack."""
    truth, probs = predict_probs(model, records, batch_size)
    return evaluate_predictions(truth, probs.argmax(axis=1), probs)


def predict_probs(model, records, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    from . import models as _models
    from .autodiff import softmax_probs

    truth = np.array([int(r.label) for r in records], dtype=np.int64)
    chunks = []
    for lo in range(0, len(records), batch_size):
        out = _models.forward(model, records[lo:lo + batch_size], mode="eval")
        chunks.append(softmax_probs(out.logits.data))
    return truth, np.concatenate(chunks, axis=0)


def export_embeddings(model, dataset, path: str, batch_size: int = 64) -> None:
    """Penultimate 120-d activations as CSV: clip_id, label, e000..e119."""
    from . import models as _models

    width = model.config.hidden_classifier
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["clip_id", "label"] + [f"e{i:03d}" for i in range(width)])
        for lo in range(0, len(dataset.records), batch_size):
            batch = dataset.records[lo:lo + batch_size]
            out = _models.forward(model, batch, mode="eval")
            for rec, row in zip(batch, out.penultimate.data):
                writer.writerow([rec.clip_id, int(rec.label)]
                                + [repr(float(v)) for v in row])
