"""Figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}


def new_figure(width: float = 5.0, height: float | None = None):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(width, height or width * golden))
    return fig, ax


def save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_histogram(edges, counts, path, label: str | None = None) -> None:
    """Bar chart of the length-scaled largest-weight histogram."""
    with plt.rc_context(_STYLE):
        fig, ax = new_figure()
        edges = np.asarray(edges)
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="tab:blue", alpha=0.7,
               edgecolor="white", label=label)
        ax.set_xlabel("largest attention weight x sentence length")
        ax.set_ylabel("count")
        if label:
            ax.legend()
        save(fig, path)


def plot_histogram_overlay(series: dict, path) -> None:
    """Step plots of several ``label -> (edges, counts)`` histograms on shared axes."""
    with plt.rc_context(_STYLE):
        fig, ax = new_figure()
        for label, (edges, counts) in series.items():
            ax.stairs(counts, edges, label=label)
        ax.set_xlabel("largest attention weight x sentence length")
        ax.set_ylabel("count")
        ax.legend()
        save(fig, path)


def plot_head_metrics(rows, path, metric: str = "entropy") -> None:
    """Per-(layer, head) bars for one metric from :func:`analysis.compute_metrics` rows."""
    sel = [r for r in rows if r["metric"] == metric and r["layer"] != "all" and r["head"] != "all"]
    with plt.rc_context(_STYLE):
        fig, ax = new_figure()
        labels = [f"L{r['layer']}H{r['head']}" for r in sel]
        ax.bar(range(len(sel)), [r["mean"] for r in sel], yerr=[r["std"] for r in sel],
               color="tab:orange", alpha=0.8, capsize=2)
        ax.set_xticks(range(len(sel)))
        ax.set_xticklabels(labels, rotation=45, ha="right")
        ax.set_ylabel(metric)
        save(fig, path)
