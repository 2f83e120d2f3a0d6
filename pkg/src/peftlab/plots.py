"""Static figure emission for run and ablation reports.

Pure output rendering: every function takes already-computed numbers, writes
one PNG, and returns the path. The Agg backend is forced so plotting works
headless and never pops a window.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_loss_curves(history: Sequence[dict], path: str) -> str:
    """Per-step training losses plus the epoch-end accuracy trace."""
    steps = [r["step"] for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))

    ax1.plot(steps, [r["total_loss"] for r in history], label="total", lw=1.2)
    ax1.plot(steps, [r["ce_loss"] for r in history], label="cross-entropy",
             lw=0.9, alpha=0.8)
    ax1.plot(steps, [r["kl_loss"] for r in history], label="consistency KL",
             lw=0.9, alpha=0.8)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.set_title("training loss")

    eval_pts = [(r["step"], r["eval_accuracy"]) for r in history
                if r["eval_accuracy"] is not None]
    if eval_pts:
        xs, ys = zip(*eval_pts)
        ax2.plot(xs, ys, marker="o", ms=3)
    ax2.set_xlabel("step")
    ax2.set_ylabel("eval accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.set_title("held-out accuracy")

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_convergence(curves: Dict[str, Sequence[float]], path: str,
                     ylabel: str = "training loss") -> str:
    """Overlay labeled loss trajectories (e.g. sharing on vs off)."""
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for label, values in curves.items():
        ax.plot(range(1, len(values) + 1), values, label=label, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if curves:
        ax.legend(fontsize=8)
    ax.set_title("convergence")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_routing_band(random_route_accs: Sequence[float], merged_acc: float,
                      path: str, extra_points: Optional[Dict[str, float]] = None) -> str:
    """Distribution of random-routing accuracies as quantile bands vs merging.

    The band-and-dot summary stands in for a violin: shaded 10-90% and
    25-75% quantile spans with the median line, and one marker per
    deterministic inference mode.
    """
    accs = np.asarray(sorted(random_route_accs), dtype=float)
    q10, q25, q50, q75, q90 = np.quantile(accs, [0.10, 0.25, 0.50, 0.75, 0.90])

    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    ax.axhspan(q10, q90, color="tab:blue", alpha=0.15,
               label="random routing 10-90%")
    ax.axhspan(q25, q75, color="tab:blue", alpha=0.30,
               label="random routing 25-75%")
    ax.axhline(q50, color="tab:blue", lw=1.2, label="random routing median")
    ax.scatter([0.5], [merged_acc], color="tab:red", zorder=5, s=45,
               label=f"merged ({merged_acc:.3f})")
    if extra_points:
        markers = iter(["s", "D", "^", "v"])
        for label, acc in extra_points.items():
            ax.scatter([0.5], [acc], marker=next(markers, "x"), zorder=5, s=30,
                       label=f"{label} ({acc:.3f})")
    ax.set_xlim(0, 1)
    ax.set_xticks([])
    ax.set_ylabel("accuracy")
    ax.set_title("inference-mode comparison")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(rows: Sequence[dict], path: str,
                  modes: Sequence[str] = ("merge", "random_route",
                                          "fixed_route", "ensemble")) -> str:
    """Grouped mean+-std bars per grid cell, one group per inference mode."""
    done = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(max(5.0, 1.1 * len(done) + 2), 3.6))
    if done:
        width = 0.8 / len(modes)
        xs = np.arange(len(done))
        for i, mode in enumerate(modes):
            means = [r.get(f"{mode}_mean") for r in done]
            stds = [r.get(f"{mode}_std") or 0.0 for r in done]
            if all(m is None for m in means):
                continue
            means = [0.0 if m is None else m for m in means]
            ax.bar(xs + i * width, means, width=width, yerr=stds, capsize=2,
                   label=mode)
        labels = [f"M={r['M']} r={r['r']}\n{'+c' if r['consistency'] else '-c'}"
                  f" {'+s' if r['sharing'] != 'none' else '-s'}" for r in done]
        ax.set_xticks(xs + 0.4 - width / 2)
        ax.set_xticklabels(labels, fontsize=7)
        ax.legend(fontsize=7)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.set_title("ablation grid")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
