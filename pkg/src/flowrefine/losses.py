"""Sequence L1 loss, ground-truth confidence maps and the regression focal loss.

The focal weight per pixel is ``1 + alpha * (1 - M)**beta`` where ``M`` is
the confidence ``exp(-|f_gt - f_pred|^2)``. Low-confidence pixels get up
to ``1 + alpha`` times the plain L1 weight; perfectly predicted pixels keep
weight 1. Variants ``a``-``d`` select the weighting used in ablations:

=======  ==============================
a        plain L1
b        ``alpha * (1 - M)**beta``
c        ``1 + alpha * M**beta``
d        ``1 + alpha * (1 - M)**beta``
=======  ==============================
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NoValidPixelsError, ShapeError
from .flow_ops import FlowField
from .tensor import Tensor, add, mul

VARIANTS = ("a", "b", "c", "d")
CONFIDENCE_SOURCES = ("final_iteration", "per_iteration", "none")


@dataclass
class ConfidenceMap:
    """Ground-truth based confidence in (0, 1], shape ``[B,1,H,W]``."""

    map: Tensor


@dataclass
class LossConfig:
    gamma: float = 0.8
    alpha: float = 1.0
    beta: float = 1.0
    variant: str = "d"
    confidence_source: str = "final_iteration"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if self.confidence_source not in CONFIDENCE_SOURCES:
            raise ConfigError(
                f"unknown confidence source {self.confidence_source!r}; expected one of {CONFIDENCE_SOURCES}"
            )


def _check_pair(f_gt: FlowField, f_pred: FlowField, what: str) -> None:
    a, b = f_gt.flow.shape, f_pred.flow.shape
    if a != b:
        axis = next((i for i, (m, n) in enumerate(zip(a, b)) if m != n), None)
        raise ShapeError(f"{what}: ground truth {a} vs prediction {b}", axis=axis)


def _valid_weights(f_gt: FlowField, f_pred: FlowField):
    """Per-element 0/1 weights over both flow channels and the valid count."""
    mask = f_gt.valid_mask()
    if f_pred.valid is not None:
        mask = mask & f_pred.valid
    count = int(mask.sum())
    if count == 0:
        raise NoValidPixelsError("no valid pixels to average over")
    return np.repeat(mask, 2, axis=1).astype(f_pred.flow.dtype), count


def _masked_mean(per_element: Tensor, weights: np.ndarray, count: int) -> Tensor:
    # channels are summed per pixel, then averaged over valid pixels
    return mul(per_element, Tensor(weights, dtype=weights.dtype)).sum() * (1.0 / count)


def l1_flow_loss(f_gt: FlowField, f_i: FlowField) -> Tensor:
    """Mean over valid pixels of ``|du| + |dv|``."""
    _check_pair(f_gt, f_i, "l1_flow_loss")
    weights, count = _valid_weights(f_gt, f_i)
    resid = (f_i.flow - f_gt.flow.detach()).abs()
    return _masked_mean(resid, weights, count)


def sequence_loss(per_iter_losses: Sequence[Tensor], gamma: float = 0.8) -> Tensor:
    """Exponentially weighted sum ``sum_i gamma**(N-i) * l_i`` (i = 1..N)."""
    losses = list(per_iter_losses)
    if not losses:
        raise ValueError("sequence_loss needs at least one per-iteration loss")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    n = len(losses)
    total = None
    for i, li in enumerate(losses, start=1):
        if not isinstance(li, Tensor):
            li = Tensor(li)
        term = li * float(gamma ** (n - i))
        total = term if total is None else add(total, term)
    return total


def confidence_map(f_gt: FlowField, f_pred: FlowField) -> ConfidenceMap:
    """``exp(-(du^2 + dv^2))`` per pixel, with the prediction detached."""
    _check_pair(f_gt, f_pred, "confidence_map")
    d = f_gt.flow.data - f_pred.flow.data
    m = np.exp(-(d * d).sum(axis=1, keepdims=True))
    return ConfidenceMap(Tensor(m, dtype=m.dtype))


def focal_weight(M: ConfidenceMap | np.ndarray, config: LossConfig) -> np.ndarray:
    """Per-pixel loss weight for ``config.variant`` (constant, no gradient)."""
    m = M.map.data if isinstance(M, ConfidenceMap) else np.asarray(M)
    a, b = config.alpha, config.beta
    if config.variant == "a":
        return np.ones_like(m)
    if config.variant == "b":
        return a * (1.0 - m) ** b
    if config.variant == "c":
        return 1.0 + a * m ** b
    if config.variant == "d":
        return 1.0 + a * (1.0 - m) ** b
    raise ValueError(f"unknown loss variant {config.variant!r}")


def rfl_loss(f_gt: FlowField, f_i: FlowField, M: ConfidenceMap, config: LossConfig) -> Tensor:
    """Confidence-weighted L1: mean over valid pixels of ``w * (|du| + |dv|)``."""
    if config.variant not in VARIANTS:
        raise ValueError(f"unknown loss variant {config.variant!r}")
    _check_pair(f_gt, f_i, "rfl_loss")
    b, _, h, w = f_i.flow.shape
    if M.map.shape != (b, 1, h, w):
        raise ShapeError(f"confidence map shape {M.map.shape} does not match {(b, 1, h, w)}", axis=1)
    weights, count = _valid_weights(f_gt, f_i)
    weights = weights * np.repeat(focal_weight(M, config), 2, axis=1).astype(weights.dtype)
    resid = (f_i.flow - f_gt.flow.detach()).abs()
    return _masked_mean(resid, weights, count)


def apply_confidence_schedule(trace, f_gt: FlowField, config: LossConfig) -> Tensor:
    """Total training loss over an iteration trace.

    ``final_iteration`` derives one confidence map from the last prediction
    and reuses it for every iteration; ``per_iteration`` recomputes it from
    each prediction; ``none`` falls back to plain per-iteration L1.
    """
    flows = list(trace.flows if hasattr(trace, "flows") else trace)
    if not flows:
        raise ValueError("apply_confidence_schedule needs a non-empty trace")
    source = config.confidence_source
    terms = []
    if source == "none":
        terms = [l1_flow_loss(f_gt, f) for f in flows]
    elif source == "final_iteration":
        M = confidence_map(f_gt, flows[-1])
        terms = [rfl_loss(f_gt, f, M, config) for f in flows]
    elif source == "per_iteration":
        terms = [rfl_loss(f_gt, f, confidence_map(f_gt, f), config) for f in flows]
    else:
        raise ValueError(f"unknown confidence source {source!r}")
    return sequence_loss(terms, config.gamma)
