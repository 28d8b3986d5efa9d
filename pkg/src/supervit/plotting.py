"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def figure_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".png")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_cost_table(rows: list[dict], path):
    """Bar chart of GMACs per (model, grid, rate) row."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(rows) + 1.5), 3.0))
        labels = [f"{r.get('model', '')} {r['grid']}@{r['rate']}".strip() for r in rows]
        ax.bar(range(len(rows)), [float(r["gmacs"]) for r in rows], color="#4c72b0")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=70, ha="right")
        ax.set_ylabel("GMACs")
        return _save(fig, path)


def plot_accuracy_cost(rows: list[dict], path):
    """Accuracy against GMACs, one marker series per keep rate."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for rate in sorted({r["rate"] for r in rows}, key=float, reverse=True):
            sel = sorted((r for r in rows if r["rate"] == rate), key=lambda r: float(r["gmacs"]))
            ax.plot([float(r["gmacs"]) for r in sel], [100 * float(r["accuracy"]) for r in sel],
                    marker="o", label=f"keep {rate}")
            for r in sel:
                ax.annotate(str(r["grid"]), (float(r["gmacs"]), 100 * float(r["accuracy"])),
                            fontsize=6, xytext=(3, 3), textcoords="offset points")
        ax.set_xlabel("GMACs")
        ax.set_ylabel("top-1 accuracy (%)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_sweep(rows: list[dict], path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        x = [float(r["mean_gmacs"]) for r in rows]
        y = [100 * float(r["accuracy"]) for r in rows]
        ax.plot(x, y, marker="o", color="#dd8452")
        for r, xi, yi in zip(rows, x, y):
            ax.annotate(f"{float(r['tau']):g}", (xi, yi), fontsize=6, xytext=(3, -8),
                        textcoords="offset points")
        ax.set_xlabel("mean GMACs per image")
        ax.set_ylabel("top-1 accuracy (%)")
        return _save(fig, path)


def plot_training(records: list[dict], path):
    """Per-subnet loss and validation accuracy across epochs."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        keys = sorted({(r["grid"], r["rate"]) for r in records}, key=lambda k: (k[0], -k[1]))
        for grid, rate in keys:
            sel = [r for r in records if r["grid"] == grid and r["rate"] == rate]
            lab = f"{grid}x{grid}@{rate:g}"
            pts = [(r["epoch"], r["loss"]) for r in sel if r["loss"] is not None]
            if pts:
                ax_l.plot(*zip(*pts), label=lab, lw=1)
            acc = [(r["epoch"], 100 * r["accuracy"]) for r in sel if r["accuracy"] is not None]
            if acc:
                ax_a.plot(*zip(*acc), label=lab, lw=1)
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("loss part (CE or KL)")
        ax_l.set_yscale("log")
        ax_a.set_xlabel("epoch")
        ax_a.set_ylabel("val accuracy (%)")
        ax_a.legend(frameon=False, ncol=2)
        return _save(fig, path)
