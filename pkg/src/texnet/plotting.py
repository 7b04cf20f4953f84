"""Critical-distance diagrams rendered with matplotlib."""
from __future__ import annotations

import json
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .stats import cd_groups  # noqa: E402

_default_dpi = 200
_rc = {
    "font.size": 9,
    "svg.fonttype": "none",
    "svg.hashsalt": "texnet",  # stable element ids -> reproducible files
    "axes.linewidth": 0.8,
}


def save(fig, fname, fmt="svg"):
    fname = os.path.expanduser(str(fname))
    with plt.rc_context(_rc):
        fig.savefig(fname, format=fmt, dpi=_default_dpi, bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)


def cd_diagram(average_ranks: Sequence[float], cd: float, names: Sequence[str],
               path=None, title: str | None = None):
    """Draw models on an average-rank axis with a CD ruler and connector bars.

    Rank 1 (best) is drawn on the left. Returns the figure, or writes it as SVG
    and returns the group description when ``path`` is given.
    """
    ranks = [float(r) for r in average_ranks]
    k = len(ranks)
    groups = cd_groups(ranks, cd)
    order = sorted(range(k), key=lambda i: ranks[i])
    lo, hi = 1, max(k, 2)
    half = (k + 1) // 2
    n_rows = max(half, k - half)

    with plt.rc_context(_rc):
        fig, ax = plt.subplots(figsize=(6, 1.4 + 0.28 * (n_rows + len(groups))))
        ax.set_xlim(lo - 0.5, hi + 0.5)
        top = 1.0
        ax.set_ylim(-(n_rows + 1.5) * 0.3 - 0.3 * len(groups), top + 0.7)
        ax.axis("off")

        ax.hlines(top, lo, hi, color="k", lw=1)
        for t in range(lo, hi + 1):
            ax.vlines(t, top, top + 0.08, color="k", lw=1)
            ax.text(t, top + 0.14, str(t), ha="center", va="bottom")

        # CD ruler
        ax.hlines(top + 0.5, lo, lo + cd, color="k", lw=1.5)
        ax.vlines([lo, lo + cd], top + 0.45, top + 0.55, color="k", lw=1.5)
        ax.text(lo + cd / 2, top + 0.58, f"CD = {cd:.3f}", ha="center", va="bottom")

        for row, i in enumerate(order):
            left = row < half
            depth = (row if left else k - 1 - row) + 1
            y = top - 0.3 * depth - 0.3 * len(groups)
            x_end = lo - 0.4 if left else hi + 0.4
            ax.plot([ranks[i], ranks[i], x_end], [top, y, y], color="k", lw=0.8)
            ax.text(x_end + (-0.05 if left else 0.05), y, f"{names[i]} ({ranks[i]:.2f})",
                    ha="right" if left else "left", va="center")

        for g_i, g in enumerate(groups):
            y = top - 0.15 - 0.25 * g_i
            xs = [ranks[i] for i in g]
            ax.hlines(y, min(xs) - 0.03, max(xs) + 0.03, color="k", lw=3, gid=f"cdbar{g_i}")

        if title:
            ax.set_title(title)

    info = {"names": list(names), "average_ranks": ranks, "cd": cd,
            "groups": [[names[i] for i in g] for g in groups]}
    if path is None:
        return fig
    save(fig, path)
    return info


def write_cd_json(path, info: dict) -> None:
    with open(path, "w") as fh:
        json.dump(info, fh, indent=2)
