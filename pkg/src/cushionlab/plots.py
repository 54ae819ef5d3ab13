"""SVG figures for the analyze command. Output is deterministic: no date
metadata and a fixed id salt."""

from __future__ import annotations

from collections.abc import Mapping
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import OutlierReport, SinkReport  # noqa: E402

plt.rcParams["svg.hashsalt"] = "cushionlab"
_META = {"Date": None, "Creator": "cushionlab"}


def plot_outliers(reports: Mapping[str, OutlierReport], path: str | Path) -> None:
    """Per-layer top-1/2/3 and median magnitudes, one line per report."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    styles = {"before": "-", "after": "--"}
    for label, rep in reports.items():
        layers = [r.layer for r in rep.layers]
        for key in ("top1", "top2", "top3", "median"):
            ax.plot(layers, [getattr(r, key) for r in rep.layers], styles.get(label, ":"), marker="o",
                    label=f"{key} ({label})")
    ax.set_xlabel("layer")
    ax.set_ylabel("|activation|")
    ax.set_yscale("log")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_attention(reports: Mapping[str, SinkReport], path: str | Path) -> None:
    """Head-averaged attention map of the last layer, side by side."""
    fig, axes = plt.subplots(1, len(reports), figsize=(4 * len(reports), 3.6), squeeze=False)
    for ax, (label, rep) in zip(axes[0], reports.items()):
        att = np.asarray(rep.mean_map[-1])
        im = ax.imshow(att, aspect="auto", cmap="viridis", interpolation="nearest")
        if rep.prefix_len:
            ax.axvline(rep.prefix_len - 0.5, color="white", linewidth=0.8)
        ax.set_title(f"{label}: prefix mass {rep.mean_prefix_mass:.2f}", fontsize=8)
        ax.set_xlabel("key position")
        ax.set_ylabel("query position")
        fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
