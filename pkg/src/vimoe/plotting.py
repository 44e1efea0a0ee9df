"""Matplotlib renderings written next to the CSV outputs (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_heatmap(h, path, title=None):
    """Display-ordered heatmap; axis ticks carry the raw class and expert ids."""
    fig, ax = plt.subplots(figsize=(1.0 + 0.5 * h.num_experts, 1.0 + 0.35 * len(h.matrix)))
    ax.imshow(h.display(), cmap="Blues", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(h.num_experts), [f"e{e}" for e in h.col_order])
    ax.set_yticks(range(len(h.row_order)), [str(c) for c in h.row_order])
    ax.set_xlabel("expert")
    ax.set_ylabel("class")
    ax.set_title(title or f"l={h.layer}")
    return _save(fig, path)


def plot_load(loads: dict, path):
    """Grouped bars of per-layer expert loads; ``loads`` maps layer l to a vector."""
    layers = sorted(loads)
    n = len(next(iter(loads.values()))) if loads else 0
    fig, ax = plt.subplots(figsize=(2.0 + 0.8 * len(layers), 3.0))
    width = 0.8 / max(n, 1)
    for e in range(n):
        ax.bar(np.arange(len(layers)) + e * width, [loads[l][e] for l in layers],
               width, label=f"e{e}")
    ax.set_xticks(np.arange(len(layers)) + 0.4 - width / 2, [f"l={l}" for l in layers])
    ax.set_ylabel("fraction of units")
    if n:
        ax.axhline(1.0 / n, color="k", lw=0.8, ls="--")
        ax.legend(fontsize="small", ncol=min(n, 4))
    return _save(fig, path)


def plot_curves(record, path):
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    a1.plot(record.epochs, record.task_loss, label="task")
    a1.plot(record.epochs, record.aux_loss, label="aux")
    a1.set_xlabel("epoch")
    a1.set_yscale("log")
    a1.legend()
    a2.plot(record.epochs, record.metric, marker="o")
    a2.set_xlabel("epoch")
    a2.set_ylabel("held-out metric")
    a2.set_ylim(0, 1)
    return _save(fig, path)


def plot_scan(cells, path):
    """Median final metric against L, one line per (N, shared)."""
    fig, ax = plt.subplots(figsize=(5, 3))
    groups = {}
    for c in cells:
        groups.setdefault((c.num_experts, c.shared_expert), {}).setdefault(
            c.moe_last_L, []).append(c.metric)
    for (n, shared), by_l in sorted(groups.items()):
        ls = sorted(by_l)
        label = "dense" if n == 0 else f"N={n}" + (" shared" if shared else "")
        ax.plot(ls, [np.nanmedian(by_l[l]) for l in ls], marker="o", label=label)
    ax.set_xlabel("MoE layers L")
    ax.set_ylabel("held-out metric")
    ax.legend(fontsize="small")
    return _save(fig, path)
