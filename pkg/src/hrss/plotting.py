"""Figures emitted next to the CLI's delimited outputs.

Rendering goes through the Agg backend with the PNG ``Software`` tag removed,
so identical inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _save(fig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def bench_figure(labels: Sequence[str], times_ns: Sequence[int], path: str | Path, title: str = "") -> None:
    """Horizontal bars of median wall time per scan variant."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 0.45 * len(labels) + 1.0))
        ms = np.asarray(times_ns, dtype=np.float64) / 1e6
        ypos = np.arange(len(labels))
        ax.barh(ypos, ms, color="0.35")
        ax.set_yticks(ypos, labels)
        ax.invert_yaxis()
        ax.set_xlabel("median wall time (ms)")
        if title:
            ax.set_title(title)
        _save(fig, path)


def contrib_figure(maps: dict[str, np.ndarray], query: tuple[int, int], path: str | Path) -> None:
    """One panel per direction; the query token is outlined in red."""
    names = list(maps)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(names), figsize=(2.2 * len(names), 2.4), squeeze=False)
        r, c = query
        for ax, name in zip(axes[0], names):
            ax.imshow(maps[name], cmap="viridis", vmin=0.0, vmax=1.0, interpolation="nearest")
            ax.add_patch(Rectangle((c - 0.5, r - 0.5), 1, 1, fill=False, edgecolor="red", linewidth=1.5))
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
        _save(fig, path)
