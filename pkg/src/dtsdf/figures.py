"""Report figures rendered to files next to the CSV/JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import MetricReport
from .voxelgrid import Direction


def per_frame_error_figure(report: MetricReport, path, title: str,
                           ylabel: str | None = None):
    """Per-frame metric values with the mean and its 95% confidence band."""
    fig, ax = plt.subplots(figsize=(7, 3.2), constrained_layout=True)
    x = np.arange(report.n)
    ax.plot(x, report.values, ".", markersize=3, color="#1f77b4", label="per frame")
    mean, ci = report.mean, report.ci95
    ax.axhline(mean, color="#d62728", linewidth=1.2, label=f"mean {mean:.2f}")
    ax.axhspan(mean - ci, mean + ci, color="#d62728", alpha=0.15,
               label="95% confidence")
    ax.set_xlabel("frame")
    ax.set_ylabel(ylabel or f"error [{report.units}]")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.savefig(path, dpi=130)
    plt.close(fig)


def memory_figure(stats: dict, path, compare: dict | None = None):
    """Per-direction block counts, optionally against a second store."""
    fig, ax = plt.subplots(figsize=(6, 3.2), constrained_layout=True)
    names = [d.name for d in Direction]
    counts = [stats["per_direction"].get(n, 0) for n in names]
    x = np.arange(len(names))
    width = 0.38 if compare else 0.7
    ax.bar(x - (width / 2 if compare else 0), counts, width,
           label=stats.get("mode", "store"))
    if compare:
        counts2 = [compare["per_direction"].get(n, 0) for n in names]
        ax.bar(x + width / 2, counts2, width, label=compare.get("mode", "other"))
        ax.legend(fontsize=8)
    ax.set_xticks(x, names, rotation=30, fontsize=8)
    ax.set_ylabel("allocated blocks")
    ax.set_title("block allocation by direction")
    fig.savefig(path, dpi=130)
    plt.close(fig)


def timings_figure(stats_rows, path):
    """Stacked per-frame stage times of a pipeline run."""
    fig, ax = plt.subplots(figsize=(7, 3.2), constrained_layout=True)
    x = np.arange(len(stats_rows))
    stages = [("t_allocate", "allocate"), ("t_fuse", "fuse"),
              ("t_combine", "combine"), ("t_raycast", "raycast"),
              ("t_track", "track")]
    bottom = np.zeros(len(stats_rows))
    for attr, label in stages:
        vals = np.array([getattr(s, attr) for s in stats_rows]) * 1000.0
        ax.bar(x, vals, bottom=bottom, width=1.0, label=label)
        bottom += vals
    ax.set_xlabel("frame")
    ax.set_ylabel("time [ms]")
    ax.set_title("per-frame stage times")
    ax.legend(fontsize=8, ncol=5)
    fig.savefig(path, dpi=130)
    plt.close(fig)
