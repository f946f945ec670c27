"""Delimited output and figure rendering for runs, sweeps and probes.

Floats are written with shortest round-trip formatting so re-reading a CSV
recovers the exact values; figures render headlessly to SVG with fixed
hash salt and no embedded date, keeping outputs reproducible.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

matplotlib.rcParams["svg.hashsalt"] = "sotu"

__all__ = [
    "fmt",
    "write_metrics_csv",
    "write_summary_csv",
    "write_matrix_csv",
    "write_collision_csv",
    "write_sweep_csv",
    "write_stability_csv",
    "render_sweep_svg",
    "render_matrix_svg",
]


def fmt(value) -> str:
    return repr(float(value))


def _open_writer(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="")


def write_metrics_csv(path, accuracies) -> None:
    with _open_writer(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "R_k"])
        for k, acc in enumerate(accuracies, 1):
            writer.writerow([k, fmt(acc)])


def write_summary_csv(path, average: float, final: float) -> None:
    with _open_writer(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["average_accuracy", "final_accuracy"])
        writer.writerow([fmt(average), fmt(final)])


def write_matrix_csv(path, matrix: np.ndarray, labels) -> None:
    labels = list(labels)
    with _open_writer(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", *labels])
        for label, row in zip(labels, matrix):
            writer.writerow([label, *(fmt(v) for v in row)])


def write_collision_csv(path, report, labels) -> None:
    labels = list(labels)
    with _open_writer(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", *labels])
        for label, row in zip(labels, report.pairwise_overlap):
            writer.writerow([label, *(fmt(v) for v in row)])
        writer.writerow(["multi_collision_rate", fmt(report.multi_collision_rate)])


SWEEP_COLUMNS = ("mask_rate", "average_accuracy", "final_accuracy",
                 "mean_abs_offdiag_cosine", "multi_collision_rate", "status")


def write_sweep_csv(path, rows) -> None:
    with _open_writer(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([
                fmt(row.mask_rate), fmt(row.average), fmt(row.final),
                fmt(row.mean_abs_offdiag_cosine), fmt(row.multi_collision_rate),
                row.status,
            ])


def write_stability_csv(path, reports) -> None:
    with _open_writer(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["mask_rate", "trial", "max_rel_change"])
        for report in reports:
            for trial, value in enumerate(report.per_trial):
                writer.writerow([fmt(report.mask_rate), trial, fmt(value)])
            writer.writerow([fmt(report.mask_rate), "mean", fmt(report.mean)])
            writer.writerow([fmt(report.mask_rate), "max", fmt(report.max)])


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_sweep_svg(path, rows) -> None:
    """Line chart of final (and average) accuracy against the masking rate."""
    ok = [r for r in rows if r.status == "ok"]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    if ok:
        rates = [r.mask_rate for r in ok]
        ax.plot(rates, [r.final for r in ok], "o-", label="final accuracy")
        ax.plot(rates, [r.average for r in ok], "s--", label="average accuracy")
        ax.legend()
    ax.set_xlabel("masking rate p")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def render_matrix_svg(path, matrix: np.ndarray, labels, title: str) -> None:
    """Heatmap of a square task-by-task matrix."""
    labels = list(labels)
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    masked = np.ma.masked_invalid(np.asarray(matrix, dtype=np.float64))
    image = ax.imshow(masked, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_title(title)
    fig.colorbar(image, ax=ax, shrink=0.85)
    fig.tight_layout()
    _save(fig, path)
