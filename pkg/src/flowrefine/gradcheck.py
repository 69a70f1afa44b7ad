"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-3, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t``.

    ``t.data`` is perturbed in place and restored. ``indices`` restricts
    the check to a subset of flat positions (others are left at zero).
    """
    grad = np.zeros(t.data.size, dtype=np.float64)
    flat = t.data.reshape(-1)
    positions = range(t.data.size) if indices is None else indices
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-3, indices=None) -> list:
    """Backpropagate ``fn()`` once and compare every input's gradient.

    Returns one relative error per input, in order.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    errors = []
    for k, t in enumerate(inputs):
        idx = None if indices is None else indices[k]
        num = numerical_grad(fn, t, step, idx)
        ana = np.zeros(t.shape) if t.grad is None else t.grad
        if idx is not None:
            mask = np.zeros(t.data.size, dtype=bool)
            mask[list(idx)] = True
            ana = ana.reshape(-1)[mask]
            num = num.reshape(-1)[mask]
        errors.append(relative_error(ana, num))
    return errors
