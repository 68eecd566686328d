"""Figure helpers for heatmaps, ablation curves and score matrices.

All functions draw with the Agg backend and write straight to files.
"""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "vitdecomp",
    "svg.fonttype": "none",
}


def figsize(width: float = 4.0, ratio: float | None = None) -> tuple[float, float]:
    ratio = ratio or (math.sqrt(5) - 1.0) / 2.0
    return width, width * ratio


def new_figure(width: float = 4.0, ratio: float | None = None, nrows: int = 1, ncols: int = 1):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=figsize(width, ratio), squeeze=False)
    return fig, ax


def save(fig, path: str | Path, dpi: int = 120) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None} if path.suffix == ".svg" else {}
    if path.suffix == ".png":
        meta = {"Software": None}
    with plt.rc_context(STYLE):
        fig.savefig(path, dpi=dpi, bbox_inches="tight", metadata=meta)
    plt.close(fig)
    return path


def symmetric_limits(values: np.ndarray) -> tuple[float, float]:
    m = float(np.abs(values).max()) if np.size(values) else 0.0
    m = m if m > 0 else 1.0
    return -m, m


def heatmap(grid: np.ndarray, path: str | Path, image: np.ndarray | None = None, cls_score: float | None = None,
            title: str = "", alpha: float = 0.6) -> Path:
    """Signed token scores on a diverging map centred at 0, optionally over the image."""
    vmin, vmax = symmetric_limits(grid)
    fig, ax = new_figure(3.2, 1.0)
    a = ax[0, 0]
    if image is not None:
        h, w = image.shape[:2]
        a.imshow(np.clip(image, 0, 1), extent=(0, w, h, 0))
        im = a.imshow(grid, cmap="bwr", vmin=vmin, vmax=vmax, alpha=alpha, extent=(0, w, h, 0),
                      interpolation="nearest")
    else:
        im = a.imshow(grid, cmap="bwr", vmin=vmin, vmax=vmax, interpolation="nearest")
    a.set_xticks([])
    a.set_yticks([])
    if title:
        a.set_title(title)
    fig.colorbar(im, ax=a, fraction=0.046, pad=0.04)
    if cls_score is not None:
        fig.text(0.02, 0.02, f"cls {cls_score:+.4f}", fontsize=7)
    return save(fig, path)


def ablation_curves(curves: dict[str, object], path: str | Path, normalized: bool = False) -> Path:
    """One line per model; markers sit at block boundaries."""
    fig, ax = new_figure(4.0)
    a = ax[0, 0]
    for name, c in curves.items():
        y = c.normalized() if normalized else np.asarray(c.accuracy)
        a.plot(c.steps, y, marker="o", ms=3, lw=1.2, label=name)
    first = next(iter(curves.values()), None)
    if first is not None and not normalized:
        a.axhline(first.chance, color="0.5", lw=0.8, ls="--")
    a.set_xlabel("layers ablated (last first)")
    a.set_ylabel("normalized accuracy" if normalized else "accuracy")
    a.legend(frameon=False)
    return save(fig, path)


def score_matrix(S, path: str | Path, top: int | None = None) -> Path:
    scores = S.scores if top is None else S.scores[:top]
    names = S.components if top is None else S.components[:top]
    vmin, vmax = symmetric_limits(scores)
    fig, ax = new_figure(2.0 + 0.5 * len(S.features), max(0.4, 0.16 * len(names)))
    a = ax[0, 0]
    im = a.imshow(scores, cmap="bwr", vmin=vmin, vmax=vmax, aspect="auto")
    a.set_xticks(range(len(S.features)), S.features, rotation=30)
    a.set_yticks(range(len(names)), names, fontsize=6)
    fig.colorbar(im, ax=a)
    return save(fig, path)


def group_bars(before: dict, after: dict, path: str | Path) -> Path:
    keys = sorted(before)
    x = np.arange(len(keys))
    fig, ax = new_figure(4.0)
    a = ax[0, 0]
    a.bar(x - 0.2, [before[k] for k in keys], 0.4, label="before")
    a.bar(x + 0.2, [after[k] for k in keys], 0.4, label="after")
    a.set_xticks(x, [str(k) for k in keys], rotation=45)
    a.set_ylabel("accuracy")
    a.set_ylim(0, 1)
    a.legend(frameon=False)
    return save(fig, path)
