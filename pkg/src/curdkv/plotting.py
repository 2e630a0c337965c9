"""Figures for sweep reports, rendered to files next to the CSV/JSON output."""

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

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
# strip the timestamp and version from PNG metadata so reruns produce identical files
PNG_METADATA = {"Software": None}


def _series(reports, value):
    grouped = defaultdict(lambda: defaultdict(list))
    for rep in reports:
        if rep.error is not None:
            continue
        grouped[f"{rep.policy}/{rep.method}"][rep.ratio].append(value(rep))
    return {
        label: (sorted(by_ratio), [float(np.mean(by_ratio[r])) for r in sorted(by_ratio)])
        for label, by_ratio in sorted(grouped.items())
    }


def plot_eviction_loss(reports, path, relative: bool = False) -> Path:
    """Mean eviction loss against compression ratio, one line per policy/method."""
    attr = "eviction_loss_rel" if relative else "eviction_loss"
    series = _series(reports, lambda r: float(np.mean(getattr(r, attr))))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for label, (xs, ys) in series.items():
            ax.plot(xs, ys, marker="o", ms=3, lw=1.2, label=label)
        ax.set_xlabel("compression ratio")
        ax.set_ylabel("relative eviction loss" if relative else "eviction loss")
        if series and all(y > 0 for _, ys in series.values() for y in ys):
            ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata=PNG_METADATA)
        plt.close(fig)
    return Path(path)


def plot_cache_bytes(reports, path) -> Path:
    """Compressed cache size against compression ratio with the linear (1 - c) reference."""
    series = _series(reports, lambda r: r.cache_bytes_compressed / max(1, r.cache_bytes_full))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        grid = np.linspace(0, 1, 11)
        ax.plot(grid, 1 - grid, color="0.6", lw=0.8, ls="--", label="1 - ratio")
        for label, (xs, ys) in series.items():
            ax.plot(xs, ys, marker="o", ms=3, lw=1.0, label=label)
        ax.set_xlabel("compression ratio")
        ax.set_ylabel("compressed / full cache bytes")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata=PNG_METADATA)
        plt.close(fig)
    return Path(path)


def render_report_figures(reports, directory) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [
        plot_eviction_loss(reports, directory / "eviction_loss.png"),
        plot_eviction_loss(reports, directory / "eviction_loss_rel.png", relative=True),
        plot_cache_bytes(reports, directory / "cache_bytes.png"),
    ]
