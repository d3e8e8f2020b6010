"""Static figure rendering for run outputs.

Figures are written next to the metrics CSV: the training figure mirrors the
four-panel layout used to report the synthetic study (train loss, test loss,
squared distance to ground truth, rank evolution, one line per client), and
the theory figure shows the exact reduced-gradient decay per instance.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import NOT_APPLICABLE, MetricsRecord


def _by_client(records: list[MetricsRecord]) -> dict[int, list[MetricsRecord]]:
    grouped = defaultdict(list)
    for record in records:
        grouped[record.client_id].append(record)
    for rows in grouped.values():
        rows.sort(key=lambda r: r.round)
    return dict(sorted(grouped.items()))


def render_training_figure(records: list[MetricsRecord], path, title: str = "") -> Path:
    grouped = _by_client(records)
    fig, axes = plt.subplots(1, 4, figsize=(16, 3.4))
    panels = (
        ("train_loss", "train loss", True),
        ("test_loss", "test loss", True),
        ("fro_dist_sq", "squared distance to ground truth", True),
        ("eff_rank", "effective rank", False),
    )
    for ax, (field, label, log_scale) in zip(axes, panels):
        for client_id, rows in grouped.items():
            steps = [r.step for r in rows]
            values = [getattr(r, field) for r in rows]
            if all(v == NOT_APPLICABLE for v in values):
                continue
            ax.plot(steps, values, label=f"client {client_id + 1}")
        ax.set_xlabel("step")
        ax.set_ylabel(label)
        if log_scale:
            ax.set_yscale("log")
        ax.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_rank_figure(records: list[MetricsRecord], path) -> Path:
    """Rank evolution only: effective rank plus the pruned rank when tracked."""
    grouped = _by_client(records)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for client_id, rows in grouped.items():
        steps = [r.step for r in rows]
        ax.plot(steps, [r.eff_rank for r in rows], label=f"client {client_id + 1} effective")
        if any(r.current_rank_k != NOT_APPLICABLE for r in rows):
            ax.plot(steps, [r.current_rank_k for r in rows], "--",
                    label=f"client {client_id + 1} allocated")
    ax.set_xlabel("step")
    ax.set_ylabel("rank")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_theory_figure(traces: dict[int, np.ndarray], path) -> Path:
    """Squared reduced-gradient norm against step, log scale, one line per instance."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for instance, grad_sq in sorted(traces.items()):
        ax.plot(np.arange(len(grad_sq)), np.maximum(grad_sq, 1e-300),
                label=f"instance {instance}")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("squared gradient norm of the reduced objective")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
