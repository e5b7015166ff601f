"""Optional figures for CLI outputs; needs matplotlib (``pip install artifact[plot]``)."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on the install
        raise RuntimeError("--plot needs matplotlib; install artifact[plot]") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_metrics(metrics_csv, out_png) -> Path:
    """Per-agent fitness against exploration steps."""
    plt = _pyplot()
    series = defaultdict(lambda: ([], []))
    with open(metrics_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            xs, ys = series[int(row["agent_id"])]
            xs.append(int(row["total_step"]))
            ys.append(float(row["fitness"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for agent, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, lw=1, label=f"agent {agent}")
    ax.set_xlabel("environment steps")
    ax.set_ylabel("fitness")
    if series:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_densities(grid: dict, out_png, centers=()) -> Path:
    """First and last density snapshot side by side."""
    plt = _pyplot()
    lo, hi = grid["extent"]
    picks = sorted({0, len(grid["densities"]) - 1})
    fig, axes = plt.subplots(1, len(picks), figsize=(4 * len(picks), 4), squeeze=False)
    for ax, k in zip(axes[0], picks):
        # densities are indexed [x, y]; imshow wants rows = y
        ax.imshow(np.asarray(grid["densities"][k]).T, origin="lower", extent=(lo, hi, lo, hi),
                  cmap="viridis")
        for cx, cy in centers:
            ax.plot(cx, cy, "w+", ms=10)
        ax.set_title(f"step {grid['snapshot_steps'][k]}")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_actions(actions_csv, out_png) -> Path:
    """Scatter of the first two action coordinates, one panel per lambda."""
    plt = _pyplot()
    data = defaultdict(lambda: defaultdict(list))
    with open(actions_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            a2 = float(row["a2"]) if "a2" in row else 0.0
            data[row["lambda"]][int(row["agent_id"])].append((float(row["a1"]), a2))
    lams = list(data)
    fig, axes = plt.subplots(1, len(lams), figsize=(4 * len(lams), 4), squeeze=False)
    for ax, lam in zip(axes[0], lams):
        for agent, pts in sorted(data[lam].items()):
            pts = np.asarray(pts)
            ax.scatter(pts[:, 0], pts[:, 1], s=2, alpha=0.4, label=f"agent {agent}")
        ax.set_title(f"lambda = {lam}")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
