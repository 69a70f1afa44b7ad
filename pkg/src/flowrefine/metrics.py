"""End-point error, KITTI-style outlier rate and per-pixel error maps."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import NoValidPixelsError, ShapeError
from .flow_ops import FlowField

OUTLIER_ABS_PX = 3.0
OUTLIER_REL = 0.05


@dataclass
class EvalReport:
    epe_mean: float
    fl_all: float
    pixel_count: int
    per_iteration_epe: Optional[list] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.epe_mean >= 0:
            raise ValueError(f"epe_mean must be >= 0, got {self.epe_mean}")
        if not 0.0 <= self.fl_all <= 100.0:
            raise ValueError(f"fl_all must be a percentage, got {self.fl_all}")

    def to_lines(self) -> list:
        """``key=value`` lines with fixed formatting (stable across runs)."""
        lines = [
            f"epe={self.epe_mean:.6f}",
            f"fl_all={self.fl_all:.6f}",
            f"pixels={self.pixel_count}",
        ]
        if self.per_iteration_epe is not None:
            for i, e in enumerate(self.per_iteration_epe, start=1):
                lines.append(f"epe_iter{i}={e:.6f}")
        for k in sorted(self.extra):
            lines.append(f"{k}={self.extra[k]}")
        return lines

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _as_arrays(f_pred: FlowField, f_gt: FlowField):
    a, b = f_pred.flow.shape, f_gt.flow.shape
    if a != b:
        axis = next((i for i, (m, n) in enumerate(zip(a, b)) if m != n), None)
        raise ShapeError(f"prediction {a} vs ground truth {b}", axis=axis)
    mask = f_gt.valid_mask()
    if f_pred.valid is not None:
        mask = mask & f_pred.valid
    return f_pred.flow.data.astype(np.float64), f_gt.flow.data.astype(np.float64), mask[:, 0]


def _epe_per_pixel(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    d = pred - gt
    return np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)


def error_map(f_pred: FlowField, f_gt: FlowField) -> np.ndarray:
    """Per-pixel end-point error ``[B,1,H,W]``; invalid pixels are 0."""
    pred, gt, mask = _as_arrays(f_pred, f_gt)
    return (_epe_per_pixel(pred, gt) * mask)[:, None]


def epe(f_pred: FlowField, f_gt: FlowField) -> float:
    """Mean Euclidean distance between predicted and true flow over valid pixels."""
    pred, gt, mask = _as_arrays(f_pred, f_gt)
    n = int(mask.sum())
    if n == 0:
        raise NoValidPixelsError("epe: no valid pixels")
    return float(_epe_per_pixel(pred, gt)[mask].sum() / n)


def outlier_mask(f_pred: FlowField, f_gt: FlowField, relative: bool = True) -> np.ndarray:
    """``[B,H,W]`` boolean outliers among valid pixels.

    A pixel is an outlier when its error exceeds 3 px and, if ``relative``,
    also exceeds 5% of the true flow magnitude.
    """
    pred, gt, mask = _as_arrays(f_pred, f_gt)
    err = _epe_per_pixel(pred, gt)
    out = err > OUTLIER_ABS_PX
    if relative:
        mag = np.sqrt(gt[:, 0] ** 2 + gt[:, 1] ** 2)
        out &= err > OUTLIER_REL * mag
    return out & mask


def fl_all(f_pred: FlowField, f_gt: FlowField, relative: bool = True) -> float:
    """Percentage of valid pixels that are outliers (see :func:`outlier_mask`)."""
    _, _, mask = _as_arrays(f_pred, f_gt)
    n = int(mask.sum())
    if n == 0:
        raise NoValidPixelsError("fl_all: no valid pixels")
    return 100.0 * int(outlier_mask(f_pred, f_gt, relative).sum()) / n


def evaluate(f_pred: FlowField, f_gt: FlowField, trace=None, relative: bool = True) -> EvalReport:
    """Bundle EPE, Fl-all and optional per-iteration EPE into a report."""
    _, _, mask = _as_arrays(f_pred, f_gt)
    per_iter = None
    if trace is not None:
        per_iter = [epe(f, f_gt) for f in trace.flows]
    return EvalReport(
        epe_mean=epe(f_pred, f_gt),
        fl_all=fl_all(f_pred, f_gt, relative),
        pixel_count=int(mask.sum()),
        per_iteration_epe=per_iter,
    )


def merge_reports(reports) -> EvalReport:
    """Pool per-sample reports as if all valid pixels were evaluated at once."""
    reports = list(reports)
    n = sum(r.pixel_count for r in reports)
    if n == 0:
        raise NoValidPixelsError("merge_reports: no valid pixels")
    epe_sum = sum(r.epe_mean * r.pixel_count for r in reports)
    outliers = sum(r.fl_all * r.pixel_count for r in reports)
    per_iter = None
    if reports and all(r.per_iteration_epe is not None for r in reports):
        k = min(len(r.per_iteration_epe) for r in reports)
        per_iter = [sum(r.per_iteration_epe[i] * r.pixel_count for r in reports) / n for i in range(k)]
    return EvalReport(epe_mean=epe_sum / n, fl_all=min(outliers / n, 100.0), pixel_count=n, per_iteration_epe=per_iter)
