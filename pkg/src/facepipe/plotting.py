"""Figures written next to benchmark and evaluation reports."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

COLORS = {"f32": "tab:blue", "i8": "tab:orange"}


def figure_path(report_path) -> Path:
    """Where the figure for ``report_path`` goes: same stem, ``.png``."""
    return Path(report_path).with_suffix(".png")


def plot_sweep(reports: Sequence, path, title: str = "Throughput vs faces per frame") -> Path:
    """Mean latency and FPS against faces per frame, one series per stage/precision."""
    series = defaultdict(list)
    for r in reports:
        series[(r.stage, r.precision)].append(r)
    with plt.rc_context(STYLE):
        fig, (ax_lat, ax_fps) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for (stage, precision), rs in sorted(series.items()):
            rs = sorted(rs, key=lambda r: r.faces_per_frame)
            xs = [r.faces_per_frame for r in rs]
            label = f"{stage} {precision}"
            color = COLORS.get(precision)
            ax_lat.plot(xs, [r.latency_ms["mean"] for r in rs], "o-", color=color, label=label)
            ax_lat.fill_between(xs, [r.latency_ms["p50"] for r in rs],
                                [r.latency_ms["p90"] for r in rs], color=color, alpha=0.15)
            ax_fps.plot(xs, [r.fps for r in rs], "o-", color=color, label=label)
        ax_lat.set_xlabel("faces per frame")
        ax_lat.set_ylabel("latency (ms)")
        ax_fps.set_xlabel("faces per frame")
        ax_fps.set_ylabel("FPS")
        ax_fps.legend(frameon=False)
        fig.suptitle(title)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_pr(curve, path, label: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3.0))
        ax.step([0.0, *curve.recall], [1.0, *curve.precision], where="post",
                label=f"{label} AP={curve.ap:.4f}".strip())
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.legend(frameon=False, loc="lower left")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path
