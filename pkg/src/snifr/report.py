"""Report rendering: fixed-width tables, CSV, and matplotlib figures.

Used by the CLI's train/compare paths. Metric values are internal [0, 1]
and render as percentages with two decimals; undefined class metrics
render as '--'. Figures go to PNG files next to the delimited output.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import Label

CLASS_NAMES = [label.name.capitalize() for label in Label]
METRICS = ("acc", "f1", "auc")


def _fmt(value: float | None) -> str:
    return f"{value * 100.0:6.2f}" if value is not None else "    --"


def render_table(rows: list[tuple[str, dict]]) -> str:
    """Fixed-width comparison table.

    Each row is (model name, report dict) with report["per_class"] keyed
    by class name and report["totals"], both holding acc/f1/auc.
    """
    groups = CLASS_NAMES + ["Total"]
    header1 = f"{'Model':<10}"
    header2 = f"{'':<10}"
    for group in groups:
        header1 += f"| {group:^20} "
        header2 += "| " + " ".join(f"{m.upper():>6}" for m in METRICS) + " "
    lines = [header1, header2, "-" * len(header1)]
    for name, report in rows:
        line = f"{name:<10}"
        for label in Label:
            metrics = report["per_class"].get(label.name)
            cells = " ".join(_fmt(metrics[m]) if metrics else _fmt(None) for m in METRICS)
            line += f"| {cells} "
        cells = " ".join(_fmt(report["totals"][m]) for m in METRICS)
        line += f"| {cells} "
        lines.append(line)
    return "\n".join(lines)


def write_csv(rows: list[tuple[str, dict]], path: str) -> None:
    """One row per model: per-class and total acc/f1/auc, in percent."""
    fields = ["model"]
    for group in [label.name.lower() for label in Label] + ["total"]:
        fields += [f"{group}_{m}" for m in METRICS]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for name, report in rows:
            row = {"model": name}
            for label in Label:
                metrics = report["per_class"].get(label.name)
                for m in METRICS:
                    row[f"{label.name.lower()}_{m}"] = (
                        round(metrics[m] * 100.0, 6) if metrics else "")
            for m in METRICS:
                row[f"total_{m}"] = round(report["totals"][m] * 100.0, 6)
            writer.writerow(row)


def totals_bar_figure(rows: list[tuple[str, dict]], path: str) -> None:
    """Grouped bars of total accuracy / F1 / AUC per model."""
    names = [name for name, _ in rows]
    x = np.arange(len(names))
    width = 0.26
    fig, ax = plt.subplots(figsize=(max(6.0, 1.6 * len(names)), 4.0))
    for i, metric in enumerate(METRICS):
        values = [report["totals"][metric] * 100.0 for _, report in rows]
        ax.bar(x + (i - 1) * width, values, width, label=metric.upper())
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("score (%)")
    ax.set_ylim(0, 100)
    ax.legend(loc="lower right")
    ax.set_title("Totals (mean over folds, average of class-wise scores)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def confusion_figure(confusion, path: str, title: str = "Confusion matrix") -> None:
    """Heatmap with per-cell counts; rows true, columns predicted."""
    confusion = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    im = ax.imshow(confusion, cmap="Blues")
    ax.set_xticks(range(len(CLASS_NAMES)), CLASS_NAMES, rotation=45, ha="right")
    ax.set_yticks(range(len(CLASS_NAMES)), CLASS_NAMES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    threshold = confusion.max() / 2.0 if confusion.max() else 0.5
    for i in range(confusion.shape[0]):
        for j in range(confusion.shape[1]):
            ax.text(j, i, str(int(confusion[i, j])), ha="center", va="center",
                    color="white" if confusion[i, j] > threshold else "black")
    fig.colorbar(im, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def curves_figure(fold_runs: list[tuple[int, list[float], list[float]]], path: str) -> None:
    """Per-fold training loss and validation metric against epoch."""
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for fold, train_loss, val_metric in fold_runs:
        epochs = np.arange(1, len(train_loss) + 1)
        ax_loss.plot(epochs, train_loss, label=f"fold {fold}")
        ax_val.plot(np.arange(1, len(val_metric) + 1), val_metric, label=f"fold {fold}")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation metric")
    ax_loss.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
