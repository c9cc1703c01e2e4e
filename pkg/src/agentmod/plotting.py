"""Figure styling and bar charts for evaluation reports."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "agentmod",
    "pdf.fonttype": 42,
}


def figure_size(n_panels: int, panel_width: float = 3.6, height: float = 2.8) -> tuple[float, float]:
    return (panel_width * n_panels, height)


def grouped_bars(ax, groups: Sequence[str], series: dict[str, Sequence[float | None]], ylabel: str = "") -> None:
    """Bars for each series side by side within each group; None values are skipped."""
    x = np.arange(len(groups))
    n = max(len(series), 1)
    width = 0.8 / n
    for i, (name, values) in enumerate(series.items()):
        xs = [x[j] + (i - (n - 1) / 2) * width for j, v in enumerate(values) if v is not None]
        ys = [v for v in values if v is not None]
        bars = ax.bar(xs, ys, width, label=name)
        ax.bar_label(bars, fmt="%.3f", fontsize=6, padding=1)
    ax.set_xticks(x)
    ax.set_xticklabels(groups, rotation=20, ha="right")
    ax.set_ylim(0, 1.3)
    ax.set_yticks([0, 0.2, 0.4, 0.6, 0.8, 1.0])
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False, loc="upper center", ncol=n, fontsize=7)


def savefig(fig, path: str | Path) -> Path:
    path = Path(path)
    logger.info("saving figure %s", path)
    # metadata pinned so reruns give identical files
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path
