"""Figure rendering for workbench reports.

Uses the Agg backend so figures render to files on headless machines.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .workbench import ForgettingReport, ScalingRow


def plot_scaling(rows: list[ScalingRow], path: str) -> None:
    """Mean per-task loss versus number of merged vectors, one line per strategy."""
    strategies = sorted({r.strategy for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for strategy in strategies:
        points = sorted((r.k, r.mean_task_loss) for r in rows if r.strategy == strategy)
        ax.plot(
            [k for k, _ in points],
            [loss for _, loss in points],
            marker="o",
            label=strategy,
        )
    ax.set_xlabel("merged task vectors (K)")
    ax.set_ylabel("mean per-task loss")
    ax.set_title("Degradation as capabilities accumulate")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_forgetting(reports: list[ForgettingReport], path: str) -> None:
    """General-task loss of each merged model against the fine-tuned worst case."""
    labels = [r.strategy if r.p is None else f"{r.strategy} (p={r.p:g})" for r in reports]
    merged = [r.general_loss_merged for r in reports]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(reports)), merged, color="tab:blue", label="merged model")
    if reports:
        ax.axhline(
            reports[0].general_loss_ft,
            color="tab:red",
            linestyle="--",
            label="worst fine-tuned model",
        )
        ax.axhline(
            reports[0].general_loss_base,
            color="tab:green",
            linestyle=":",
            label="base model",
        )
    ax.set_xticks(range(len(reports)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("general-task loss")
    ax.set_title("Forgetting after merging")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
