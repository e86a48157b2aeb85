"""Static figures: attention heat maps, map + path drawings, BLEU bars.

Everything renders with the Agg backend straight to files.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import worldmodel as wm  # noqa: E402

_FLOOR_RGB = {
    "blue": "#4a78c2", "brown": "#8b5a2b", "gray": "#8c8c8c",
    "green": "#4c9a4c", "pink": "#e58fb0", "yellow": "#d9c23a",
}


def plot_alignment(export: Mapping, out_file, title: str | None = None) -> np.ndarray:
    """Heat map of an exported alignment (rows: words, columns: CAS tokens).
    Darker cells carry more attention.  Returns the plotted matrix."""
    alpha = np.asarray(export["alpha"], dtype=float)
    fig, ax = plt.subplots(figsize=(0.5 * alpha.shape[1] + 2, 0.35 * alpha.shape[0] + 1.5))
    ax.imshow(alpha, cmap="Greys", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(alpha.shape[1]), export["cas_tokens"], rotation=60, ha="right", fontsize=8)
    ax.set_yticks(range(alpha.shape[0]), export["words"], fontsize=8)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_file)
    plt.close(fig)
    return alpha


def plot_map(world: wm.WorldMap, out_file, path: wm.Path | None = None, title: str | None = None) -> list[wm.Node]:
    """Edges coloured by floor, objects labelled, the path drawn on top.
    Returns the path nodes that were drawn, in order."""
    fig, ax = plt.subplots(figsize=(6, 6))
    for (a, b), edge in sorted(world.edges.items()):
        ax.plot([a[0], b[0]], [a[1], b[1]], color=_FLOOR_RGB.get(edge.floor_color, "black"),
                linewidth=6, solid_capstyle="round", zorder=1)
    xs, ys = zip(*sorted(world.nodes))
    ax.scatter(xs, ys, s=18, color="black", zorder=2)
    for node, kind in sorted(world.objects.items()):
        ax.annotate(kind, node, xytext=(4, 4), textcoords="offset points", fontsize=8, zorder=4)
    drawn: list[wm.Node] = []
    if path is not None:
        for pose in path.poses:
            if not drawn or drawn[-1] != pose.node:
                drawn.append(pose.node)
        px, py = zip(*drawn)
        ax.plot(px, py, color="red", linewidth=2, zorder=3)
        ax.scatter(px, py, s=30, color="red", zorder=3)
        dx, dy = path.start.heading.delta
        ax.annotate("start", path.start.node, xytext=(-20, -14), textcoords="offset points", fontsize=8, color="red")
        ax.arrow(path.start.node[0], path.start.node[1], 0.3 * dx, 0.3 * dy, head_width=0.12, color="red", zorder=5)
        ax.annotate("goal", path.end.node, xytext=(4, -14), textcoords="offset points", fontsize=8, color="red")
    ax.set_aspect("equal")
    ax.margins(0.15)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_file)
    plt.close(fig)
    return drawn


def plot_bleu(scores: Mapping[str, tuple[float, float]], out_file) -> None:
    """Grouped bars of (sentence, corpus) BLEU per configuration."""
    names = list(scores)
    pos = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 2, 3.5))
    ax.bar(pos - 0.2, [scores[n][0] for n in names], width=0.4, label="sentence")
    ax.bar(pos + 0.2, [scores[n][1] for n in names], width=0.4, label="corpus")
    ax.set_xticks(pos, names)
    ax.set_ylabel("BLEU (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_file)
    plt.close(fig)


def plot_curves(curves: Mapping[str, Sequence[float]], out_file, ylabel: str = "loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in curves.items():
        ax.plot(range(1, len(ys) + 1), ys, marker="o", markersize=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_file)
    plt.close(fig)
