"""Report figures: pattern frequencies and per-pattern latency percentages."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def plot_pattern_counts(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        names = [f"{r['rank']}:{r['digest'][:6]}" for r in rows]
        ax.bar(names, [r["count"] for r in rows], color="0.35")
        ax2 = ax.twinx()
        ax2.plot(names, [100 * r["cumulative"] for r in rows], color="tab:red", marker="o", lw=1)
        ax2.set_ylim(0, 105)
        ax2.set_ylabel("cumulative %")
        ax.set_ylabel("paths")
        ax.set_title("dominated path patterns")
        ax.tick_params(axis="x", rotation=45)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_latency_percentages(rows: Sequence[dict], path: str | Path) -> Path:
    """Stacked horizontal bars, one per pattern, split by segment label."""
    path = Path(path)
    rows = [r for r in rows if r["by_label"]]
    labels = sorted({lbl for r in rows for lbl in r["by_label"]})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 0.5 * max(len(rows), 2) + 1.5))
        cmap = plt.get_cmap("tab20")
        names = [f"{r['rank']}:{r['digest'][:6]}" for r in rows]
        left = [0.0] * len(rows)
        for i, lbl in enumerate(labels):
            widths = [r["by_label"].get(lbl, 0.0) for r in rows]
            ax.barh(names, widths, left=left, color=cmap(i % 20), label=lbl)
            left = [a + b for a, b in zip(left, widths)]
        ax.set_xlim(0, 100)
        ax.set_xlabel("latency %")
        ax.invert_yaxis()
        ax.legend(fontsize=7, ncol=2, loc="upper left", bbox_to_anchor=(1.0, 1.0), frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
