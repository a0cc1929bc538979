"""Report figures: DET curves, EER bars and training curves.

Figures are drawn on an Agg canvas without touching pyplot state and saved
as PNG with no timestamp/software metadata, so identical inputs give
identical files.
"""
from __future__ import annotations

from io import BytesIO
from pathlib import Path
from typing import Mapping

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from scipy.stats import norm

from .io import atomic_write
from .metrics import det_points

_DET_TICKS = np.array([0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 0.9])
_PNG_METADATA = {"Software": None}


def _figure(width=5.0, height=4.0):
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> Path:
    buf = BytesIO()
    fig.savefig(buf, format="png", metadata=_PNG_METADATA)
    return atomic_write(path, buf.getvalue())


def _thin(x: np.ndarray, y: np.ndarray, max_points: int = 4000):
    if len(x) <= max_points:
        return x, y
    keep = np.unique(np.linspace(0, len(x) - 1, max_points).round().astype(int))
    return x[keep], y[keep]


def plot_det(curves: Mapping[str, tuple], path, title: str = "DET") -> Path:
    """``curves`` maps a system name to ``(target_scores, nontarget_scores)``."""
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    for name, (tar, non) in curves.items():
        x, y = _thin(*det_points(np.asarray(tar), np.asarray(non)))
        ax.plot(x, y, lw=1.2, label=name)
    ticks = norm.ppf(_DET_TICKS)
    labels = [f"{100 * t:g}" for t in _DET_TICKS]
    ax.set_xticks(ticks, labels)
    ax.set_yticks(ticks, labels)
    lim = (norm.ppf(0.0005), norm.ppf(0.95))
    ax.set_xlim(lim)
    ax.set_ylim(lim)
    ax.plot(lim, lim, color="0.7", lw=0.8, ls=":")
    ax.set_xlabel("false alarm rate [%]")
    ax.set_ylabel("miss rate [%]")
    ax.set_title(title)
    ax.grid(True, lw=0.3)
    ax.legend(fontsize=8, loc="upper right")
    fig.tight_layout()
    return _save(fig, path)


def plot_eer_bars(eers: Mapping[str, float], path, n_params: Mapping[str, int] | None = None) -> Path:
    fig = _figure(5.0, 3.2)
    ax = fig.add_subplot(1, 1, 1)
    names = list(eers)
    vals = [eers[n] for n in names]
    bars = ax.bar(range(len(names)), vals, color="0.55")
    for b, v in zip(bars, vals):
        ax.annotate(f"{v:.2f}", (b.get_x() + b.get_width() / 2, v), ha="center", va="bottom", fontsize=8)
    ticks = names if n_params is None else [f"{n}\n{n_params[n]}" for n in names]
    ax.set_xticks(range(len(names)), ticks, fontsize=8)
    ax.set_ylabel("EER [%]")
    if vals:
        lo, hi = min(vals), max(vals)
        pad = max(0.5, 0.15 * (hi - lo))
        ax.set_ylim(max(0.0, lo - 2 * pad), hi + pad)
    fig.tight_layout()
    return _save(fig, path)


def plot_training(histories: Mapping[str, list], path) -> Path:
    """CV cross-entropy per epoch for each retrained system; phase changes are marked."""
    fig = _figure(6.0, 3.6)
    ax = fig.add_subplot(1, 1, 1)
    for name, hist in histories.items():
        if not hist:
            continue
        epochs = [h["epoch"] for h in hist]
        line, = ax.plot(epochs, [h["cv_loss"] for h in hist], lw=1.2, label=name)
        phases = [h["phase"] for h in hist]
        for i in range(1, len(hist)):
            if phases[i] != phases[i - 1]:
                ax.axvline(epochs[i] - 0.5, color=line.get_color(), lw=0.6, ls="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("CV cross-entropy")
    ax.grid(True, lw=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
