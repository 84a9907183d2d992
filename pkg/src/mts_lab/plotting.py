"""SVG figures for backtest outputs.

Figures are rendered with the Agg backend and a fixed SVG hash salt and no
date stamp, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import datetime as dt
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "svg.hashsalt": "mts-lab",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_equity(path: str | Path, dates: Sequence[dt.date], curves: Mapping[str, Sequence[float]],
                title: str = "Total asset", normalise: bool = True) -> Path:
    """Line chart of one or more equity curves; ``normalise`` rebases each to 1 at the start."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7.0, 3.2))
        x = np.arange(len(dates))
        for label, values in curves.items():
            v = np.asarray(values, dtype=np.float64)
            ax.plot(x[: len(v)], v / v[0] if normalise else v, label=label)
        _date_ticks(ax, dates)
        ax.set_ylabel("value / initial" if normalise else "value")
        ax.set_title(title)
        ax.legend(frameon=False, loc="best")
        fig.tight_layout()
        return _save(fig, path)


def plot_trend(path: str | Path, dates: Sequence[dt.date], tr: Sequence[float],
               u: Sequence[float], v: Sequence[float]) -> Path:
    """Trend index with the short cap (log scale) and buy limit underneath."""
    with plt.rc_context(_RC):
        fig, (ax0, ax1, ax2) = plt.subplots(3, 1, figsize=(7.0, 4.8), sharex=True)
        x = np.arange(len(dates))
        ax0.step(x, tr, where="post")
        ax0.set_ylim(-0.05, 1.05)
        ax0.set_ylabel("trend index")
        ax1.step(x, np.maximum(np.asarray(u, float), 1.0), where="post", color="tab:red")
        ax1.set_yscale("log")
        ax1.set_ylabel("short cap")
        ax2.step(x, v, where="post", color="tab:green")
        ax2.set_ylim(0.0, 1.1)
        ax2.set_ylabel("buy limit")
        _date_ticks(ax2, dates)
        fig.tight_layout()
        return _save(fig, path)


def plot_metrics_bars(path: str | Path, rows: Mapping[str, Mapping[str, float | None]],
                      metrics: Sequence[str]) -> Path:
    """Grouped bars, one group per metric and one bar per run."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7.0, 3.2))
        labels = list(rows)
        width = 0.8 / max(len(labels), 1)
        x = np.arange(len(metrics))
        for i, label in enumerate(labels):
            vals = [rows[label].get(m) for m in metrics]
            ax.bar(x + i * width, [np.nan if y is None else y for y in vals], width, label=label)
        ax.set_xticks(x + width * (len(labels) - 1) / 2, metrics)
        ax.axhline(0.0, color="black", linewidth=0.6)
        ax.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def _date_ticks(ax, dates: Sequence[dt.date], count: int = 6) -> None:
    if not len(dates):
        return
    idx = np.unique(np.linspace(0, len(dates) - 1, min(count, len(dates))).astype(int))
    ax.set_xticks(idx, [dates[i].isoformat() for i in idx], fontsize=7)
