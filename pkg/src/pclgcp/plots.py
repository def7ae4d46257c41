"""PNG conveniences.  CSV files are the contract; figures only mirror them."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap  # noqa: E402

# fixed ramp so that figures do not depend on matplotlib's default style
RAMP = LinearSegmentedColormap.from_list(
    "pclgcp", ["#2c7bb6", "#abd9e9", "#ffffbf", "#fdae61", "#d7191c"], N=256
)
SWEEP_COLOURS = ["#d7191c", "#fdae61", "#1a9641", "#2c7bb6", "#7b3294", "#404040"]
_META = {"Software": None}


def heatmaps(path, window, surfaces: dict, title: str = "") -> None:
    """One panel per surface, each with its own colour bar."""
    k = len(surfaces)
    fig, axes = plt.subplots(1, k, figsize=(3.6 * k, 3.2), squeeze=False)
    extent = (window.xmin, window.xmax, window.ymin, window.ymax)
    for ax, (name, vals) in zip(axes[0], surfaces.items()):
        img = ax.imshow(
            np.asarray(vals).reshape(window.nrow, window.ncol), origin="lower", extent=extent, cmap=RAMP, aspect="auto"
        )
        ax.set_title(name, fontsize=9)
        ax.tick_params(labelsize=7)
        fig.colorbar(img, ax=ax, shrink=0.8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=90, metadata=_META)
    plt.close(fig)


def interval_plot(path, rows) -> None:
    """Credible intervals per coefficient, one colour per U_sigma.

    ``rows`` holds dicts with keys U_sigma, name, mean, q025, q975.
    """
    names = sorted({r["name"] for r in rows if r["name"] != "(Intercept)"})
    us = sorted({r["U_sigma"] for r in rows})
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names) + 2), 3.4))
    width = 0.8 / max(len(us), 1)
    for k, u in enumerate(us):
        colour = SWEEP_COLOURS[k % len(SWEEP_COLOURS)]
        for i, nm in enumerate(names):
            r = next((r for r in rows if r["U_sigma"] == u and r["name"] == nm), None)
            if r is None:
                continue
            x = i - 0.4 + width * (k + 0.5)
            ax.plot([x, x], [r["q025"], r["q975"]], color=colour, lw=2)
            ax.plot(x, r["mean"], "o", color=colour, ms=3, label=f"U={u:g}" if i == 0 else None)
    ax.axhline(0.0, color="grey", lw=0.5)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("coefficient")
    if us:
        ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=90, metadata=_META)
    plt.close(fig)


def density_plot(path, x, y, xlabel: str) -> None:
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    ax.plot(x, y, color=SWEEP_COLOURS[3])
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    ax.set_ylim(bottom=0.0)
    fig.tight_layout()
    fig.savefig(path, dpi=90, metadata=_META)
    plt.close(fig)
