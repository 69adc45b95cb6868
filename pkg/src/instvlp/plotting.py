"""PNG figures for training logs, score maps and evaluation reports.

Figures are drawn on the Agg canvas directly, so nothing here touches
pyplot's global state or needs a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

COMPONENTS = ("itc", "inter", "itm", "intra", "reg", "total")


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=110, metadata={"Software": None})
    return path


def loss_curves(rows, path, stage2_start: int | None = None) -> Path:
    """One panel per loss component against the global step."""
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 8)
    fig = Figure(figsize=(9, 5.5))
    axes = fig.subplots(2, 3, sharex=True)
    for k, (ax, name) in enumerate(zip(axes.ravel(), COMPONENTS)):
        ax.plot(rows[:, 0], rows[:, k + 1], lw=1.0, color="C0" if name != "total" else "k")
        ax.set_title(name, fontsize=9)
        if stage2_start is not None:
            ax.axvline(stage2_start, color="0.6", ls=":", lw=0.8)
        ax.tick_params(labelsize=7)
    for ax in axes[1]:
        ax.set_xlabel("step", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def score_map(S: np.ndarray, path, ranked=None, truth=None, top: int = 3) -> Path:
    """Heat map of ``S`` with the top ``top`` ranked boxes (and the truth, if given)."""
    fig = Figure(figsize=(4.2, 4))
    ax = fig.subplots()
    im = ax.imshow(S, cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    for i, (box, score) in enumerate((ranked or [])[:top]):
        ax.add_patch(Rectangle((box.x1 - 0.5, box.y1 - 0.5), box.x2 - box.x1, box.y2 - box.y1, fill=False,
                               ec="w" if i == 0 else "0.8", lw=2.0 if i == 0 else 0.8, ls="-" if i == 0 else "--"))
        ax.text(box.x1, box.y1 - 0.7, f"{score:.2f}", color="w", fontsize=7)
    if truth is not None:
        ax.add_patch(Rectangle((truth.x1 - 0.5, truth.y1 - 0.5), truth.x2 - truth.x1, truth.y2 - truth.y1,
                               fill=False, ec="r", lw=1.2))
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def metric_bars(report: dict, path, title: str = "") -> Path:
    """Horizontal bars for every numeric metric in ``report`` (nested one level)."""
    names, values = [], []
    for key, val in report.items():
        if isinstance(val, dict):
            for sub, v in val.items():
                if isinstance(v, float):
                    names.append(f"{key} {sub}")
                    values.append(v)
        elif isinstance(val, float):
            names.append(key)
            values.append(val)
    fig = Figure(figsize=(5.5, 0.3 * len(names) + 1.2))
    ax = fig.subplots()
    y = np.arange(len(names))
    ax.barh(y, values, color="C2")
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlim(0, max(1.0, max(values, default=1.0)))
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
