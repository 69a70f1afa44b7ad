"""Grayscale analysis renders and matplotlib report figures.

Intensity mappings (8-bit, rounded to nearest):

* confidence: ``255 * M`` so M = 1 is white and M -> 0 is black.
* error: ``255 * min(err / max_error, 1)`` so zero error is black; with no
  ``max_error`` the per-image maximum is used.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .flow_io import flow_to_color
from .tensor import Tensor


def _to_2d(arr) -> np.ndarray:
    if hasattr(arr, "map"):
        arr = arr.map
    if isinstance(arr, Tensor):
        arr = arr.data
    a = np.asarray(arr, dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected a single-channel map, got shape {np.shape(arr)}")
    return a


def confidence_render(M) -> np.ndarray:
    """ConfidenceMap / SciMap / array with values in [0, 1] to uint8 grayscale."""
    m = np.clip(_to_2d(M), 0.0, 1.0)
    return np.round(m * 255).astype(np.uint8)


def error_render(err, max_error: Optional[float] = None) -> np.ndarray:
    """Per-pixel error map to uint8 grayscale (black = no error)."""
    e = _to_2d(err)
    top = float(e.max()) if max_error is None else float(max_error)
    if top <= 0:
        return np.zeros(e.shape, dtype=np.uint8)
    return np.round(np.clip(e / top, 0.0, 1.0) * 255).astype(np.uint8)


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    return path


def iteration_panels(flows: Sequence, path, max_magnitude: Optional[float] = None, titles=None) -> Path:
    """One color-coded panel per iteration, sharing a magnitude scale."""
    fields = [f.to_hw2() if hasattr(f, "to_hw2") else np.asarray(f) for f in flows]
    if max_magnitude is None:
        max_magnitude = max(float(np.hypot(a[..., 0], a[..., 1]).max()) for a in fields) or 1.0
    n = len(fields)
    fig = Figure(figsize=(2.2 * n, 2.4))
    for i, a in enumerate(fields):
        ax = fig.add_subplot(1, n, i + 1)
        ax.imshow(flow_to_color(a, max_magnitude), interpolation="nearest")
        ax.set_title(titles[i] if titles else f"iter = {i + 1}", fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def analysis_figure(flow_pred, flow_gt, error, confidence, path) -> Path:
    """Prediction, ground truth, error map and confidence map side by side."""
    gt = flow_gt.to_hw2() if hasattr(flow_gt, "to_hw2") else np.asarray(flow_gt)
    pred = flow_pred.to_hw2() if hasattr(flow_pred, "to_hw2") else np.asarray(flow_pred)
    scale = float(np.hypot(gt[..., 0], gt[..., 1]).max()) or 1.0
    panels = [
        ("prediction", flow_to_color(pred, scale), None),
        ("ground truth", flow_to_color(gt, scale), None),
        ("error", error_render(error), "gray"),
        ("confidence", confidence_render(confidence), "gray"),
    ]
    fig = Figure(figsize=(9, 2.6))
    for i, (title, img, cmap) in enumerate(panels):
        ax = fig.add_subplot(1, 4, i + 1)
        ax.imshow(img, cmap=cmap, vmin=0, vmax=255, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def training_curve(steps, losses, path, eval_steps=None, eval_epe=None) -> Path:
    fig = Figure(figsize=(6, 3.2))
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(steps, losses, lw=0.8, label="training loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if eval_steps:
        ax2 = ax.twinx()
        ax2.plot(eval_steps, eval_epe, "o-", color="C1", label="held-out EPE")
        ax2.set_ylabel("EPE (px)")
    ax.set_title("training")
    fig.tight_layout()
    return _save(fig, path)


def ablation_chart(labels, values, path, ylabel="EPE (px)", title="ablation") -> Path:
    fig = Figure(figsize=(max(4.0, 0.9 * len(labels) + 1), 3.2))
    ax = fig.add_subplot(1, 1, 1)
    ax.bar(range(len(values)), values, color="C0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
