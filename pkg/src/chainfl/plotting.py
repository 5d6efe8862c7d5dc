"""Figures written next to a run's report."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import rc_context
from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.5,
    "lines.markersize": 4,
}

# PNG metadata would otherwise carry the matplotlib version string
_META = {"Software": None}


def plot_round_metrics(report, path) -> Path:
    rounds = [r.round for r in report.rounds]
    with rc_context(STYLE):
        fig = Figure(figsize=(6.4, 2.6))
        ax_loss, ax_acc = fig.subplots(1, 2)
        ax_loss.plot(rounds, [r.mean_loss for r in report.rounds], "o-", label="client mean")
        if all(r.global_loss is not None for r in report.rounds):
            ax_loss.plot(rounds, [r.global_loss for r in report.rounds], "s--", label="global (test)")
        ax_loss.set_xlabel("round")
        ax_loss.set_ylabel("cross-entropy")
        ax_loss.legend(frameon=False)

        ax_acc.plot(rounds, [r.mean_accuracy for r in report.rounds], "o-", label="client mean")
        if all(r.global_accuracy is not None for r in report.rounds):
            ax_acc.plot(rounds, [r.global_accuracy for r in report.rounds], "s--",
                        label="global (test)")
        ax_acc.set_xlabel("round")
        ax_acc.set_ylabel("accuracy")
        ax_acc.set_ylim(0, 1.02)
        ax_acc.legend(frameon=False, loc="lower right")
        for ax in (ax_loss, ax_acc):
            ax.set_xticks(rounds)
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata=_META)
    return Path(path)


def plot_incentives(report, path) -> Path:
    """Stacked per-round rewards for every client."""
    clients = [c.client_id for c in report.rounds[0].clients] if report.rounds else []
    with rc_context(STYLE):
        fig = Figure(figsize=(6.4, 2.8))
        ax = fig.subplots()
        bottom = np.zeros(len(clients))
        for r in report.rounds:
            rewards = np.array([c.reward for c in r.clients], dtype=float)
            ax.bar(clients, rewards, bottom=bottom, label=f"round {r.round}")
            bottom += rewards
        ax.set_ylabel("tokens")
        ax.tick_params(axis="x", rotation=45)
        ax.legend(frameon=False, ncol=min(len(report.rounds), 5), loc="upper center",
                  bbox_to_anchor=(0.5, 1.18))
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata=_META)
    return Path(path)
