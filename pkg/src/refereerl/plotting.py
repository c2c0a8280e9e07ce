"""Figure rendering for the report paths. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import VanishmentProfile  # noqa: E402


def plot_vanishment(profiles: Sequence[VanishmentProfile], path: str | Path, closed_form: bool = True) -> Path:
    """|A_t| against distance from the goal, log scale, one line per profile."""
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn_closed = False
    for p in profiles:
        if p.empty:
            continue
        ax.semilogy(p.horizon_offsets, [max(abs(v), 1e-300) for v in p.gae_values], label=p.label or "GAE")
        if closed_form and not drawn_closed:
            ax.semilogy(p.horizon_offsets, p.closed_form, "k--", lw=1, label="(γλ)^k R")
            drawn_closed = True
    ax.set_xlabel("steps before success (k = T-1-t)")
    ax.set_ylabel("|A_t|")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_ablation(cells: Mapping[str, Mapping[str, Sequence[float]]], tasks: Sequence[str], path: str | Path) -> Path:
    """Grouped bars: one group per task, one bar per reward mode, error bars = sd over seeds."""
    modes = list(cells)
    width = 0.8 / max(len(modes), 1)
    x = np.arange(len(tasks))
    fig, ax = plt.subplots(figsize=(1.8 * len(tasks) + 2, 4))
    for j, mode in enumerate(modes):
        means = [np.mean(cells[mode][t]) if len(cells[mode].get(t, [])) else np.nan for t in tasks]
        sds = [np.std(cells[mode][t]) if len(cells[mode].get(t, [])) else 0.0 for t in tasks]
        ax.bar(x + (j - (len(modes) - 1) / 2) * width, means, width, yerr=sds, capsize=3, label=mode)
    ax.set_xticks(x, tasks)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training(metrics: Sequence[Mapping[str, float]], path: str | Path) -> Path:
    """Success rate and mean |A_t| per iteration."""
    its = [m["iteration"] for m in metrics]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.plot(its, [m["success_rate"] for m in metrics])
    a.set_xlabel("iteration")
    a.set_ylabel("rollout success rate")
    b.plot(its, [m["mean_abs_advantage"] for m in metrics])
    b.set_xlabel("iteration")
    b.set_ylabel("mean |A_t|")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
