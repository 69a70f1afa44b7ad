"""Flow warping, the self-cleaning quality map, and local correlation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import NonFiniteError, ShapeError
from .ops import bilinear_sample
from .tensor import Tensor, add, check_same_shape, make_node


@dataclass
class FlowField:
    """Dense displacement ``flow [B,2,H,W]`` in pixels plus optional validity.

    Channel 0 is the horizontal component u, channel 1 the vertical v.
    """

    flow: Tensor
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        if not isinstance(self.flow, Tensor):
            self.flow = Tensor(self.flow)
        f = self.flow
        if f.ndim != 4 or f.shape[1] != 2:
            raise ShapeError(f"flow must be [B,2,H,W], got {f.shape}", axis=1 if f.ndim == 4 else None)
        if not np.all(np.isfinite(f.data)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(f.data))[0])
            raise NonFiniteError(f"flow has a non-finite value at {bad}", index=bad)
        if self.valid is not None:
            v = np.asarray(self.valid, dtype=bool)
            if v.ndim == 2:
                v = v[None, None]
            expected = (f.shape[0], 1, f.shape[2], f.shape[3])
            if v.shape != expected:
                axis = next((i for i, (a, b) in enumerate(zip(v.shape, expected)) if a != b), None)
                raise ShapeError(f"valid mask shape {v.shape} does not match {expected}", axis=axis)
            self.valid = v

    @classmethod
    def from_hw2(cls, arr: np.ndarray, valid: Optional[np.ndarray] = None, dtype=None) -> "FlowField":
        """Build from an ``[H, W, 2]`` array (the on-disk layout)."""
        arr = np.asarray(arr)
        data = arr.transpose(2, 0, 1)[None]
        return cls(Tensor(np.ascontiguousarray(data), dtype=dtype or arr.dtype), valid)

    def to_hw2(self, batch: int = 0) -> np.ndarray:
        return np.ascontiguousarray(self.flow.data[batch].transpose(1, 2, 0))

    @property
    def shape(self):
        return self.flow.shape

    def valid_mask(self) -> np.ndarray:
        """Boolean ``[B,1,H,W]`` mask; all True when no mask is attached."""
        if self.valid is None:
            b, _, h, w = self.flow.shape
            return np.ones((b, 1, h, w), dtype=bool)
        return self.valid

    def detach(self) -> "FlowField":
        return FlowField(self.flow.detach(), self.valid)


@dataclass
class SciMap:
    """Per-pixel warping-consistency quality in [0, 1], shape ``[B,1,H,W]``."""

    map: Tensor


def pixel_grid(batch: int, height: int, width: int, dtype) -> np.ndarray:
    """Absolute (x, y) pixel coordinates as ``[B,2,H,W]``."""
    ys, xs = np.meshgrid(np.arange(height, dtype=dtype), np.arange(width, dtype=dtype), indexing="ij")
    grid = np.stack([xs, ys])[None]
    return np.repeat(grid, batch, axis=0)


def warp(features: Tensor, flow) -> Tensor:
    """Backward-warp ``features`` so output (x, y) reads input at (x+u, y+v)."""
    if isinstance(flow, FlowField):
        flow = flow.flow
    if features.ndim != 4:
        raise ShapeError(f"features must be [B,C,H,W], got {features.shape}")
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"flow must be [B,2,H,W], got {flow.shape}", axis=1)
    for axis in (0, 2, 3):
        if features.shape[axis] != flow.shape[axis]:
            raise ShapeError(
                f"warp: features axis {axis} has size {features.shape[axis]} but flow has {flow.shape[axis]}",
                axis=axis,
            )
    B, _, H, W = features.shape
    coords = add(flow, Tensor(pixel_grid(B, H, W, flow.dtype), dtype=flow.dtype))
    return bilinear_sample(features, coords)


def sci_map(f1: Tensor, f2_warped: Tensor) -> SciMap:
    """Gaussian-kernel similarity of two feature maps, one value per pixel.

    ``G = exp(-(1 / (2*sqrt(C))) * sum_c (f1 - f2')**2)`` where C is the
    channel count. Equal features give exactly 1; the value falls toward 0
    as the squared difference grows.
    """
    check_same_shape(f1, f2_warped, "sci_map")
    if f1.ndim != 4:
        raise ShapeError(f"sci_map inputs must be [B,C,H,W], got {f1.shape}")
    C = f1.shape[1]
    if C < 1:
        raise ShapeError("sci_map needs at least one channel", axis=1)
    diff = f1 - f2_warped
    ssd = (diff * diff).sum(axis=1, keepdims=True)
    return SciMap((ssd * (-1.0 / (2.0 * math.sqrt(C)))).exp())


# Gram-matrix path is used while B * (H*W)**2 stays below this many elements
GRAM_LIMIT = 1 << 22


@lru_cache(maxsize=32)
def _window_index(height: int, width: int, radius: int):
    """Flat Gram-matrix indices ``p*HW + q`` for every pixel p and window
    offset, with q border-clamped; shaped ``[(2r+1)^2, H*W]``."""
    D = 2 * radius + 1
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    p = (ys * width + xs).ravel()
    idx = np.empty((D * D, height * width), dtype=np.int64)
    for dy in range(D):
        for dx in range(D):
            qy = np.clip(ys + dy - radius, 0, height - 1)
            qx = np.clip(xs + dx - radius, 0, width - 1)
            idx[dy * D + dx] = p * (height * width) + (qy * width + qx).ravel()
    return idx


def local_correlation(f1: Tensor, f2: Tensor, radius: int = 3, method: str = "auto") -> Tensor:
    """Normalized inner products over a ``(2r+1)^2`` displacement window.

    Channel ``k = (dy + r) * (2r + 1) + (dx + r)`` holds
    ``<f1(x, y), f2(x + dx, y + dy)> / sqrt(C)`` with f2 indices clamped to
    the border. ``method`` picks ``"gram"`` (all-pairs matmul then gather,
    fast on small maps), ``"shift"`` (one shifted product per offset) or
    ``"auto"``.
    """
    if not isinstance(radius, (int, np.integer)) or radius < 1:
        raise ValueError(f"correlation radius must be an integer >= 1, got {radius!r}")
    check_same_shape(f1, f2, "local_correlation")
    if f1.ndim != 4:
        raise ShapeError(f"local_correlation inputs must be [B,C,H,W], got {f1.shape}")
    B, C, H, W = f1.shape
    if method == "auto":
        method = "gram" if B * (H * W) ** 2 <= GRAM_LIMIT else "shift"
    if method == "gram":
        return _correlation_gram(f1, f2, int(radius))
    if method == "shift":
        return _correlation_shift(f1, f2, int(radius))
    raise ValueError(f"unknown correlation method {method!r}")


def _correlation_gram(f1: Tensor, f2: Tensor, r: int) -> Tensor:
    B, C, H, W = f1.shape
    n = H * W
    scale = 1.0 / math.sqrt(C)
    idx = _window_index(H, W, r)
    a = f1.data.reshape(B, C, n)
    b = f2.data.reshape(B, C, n)
    gram = a.transpose(0, 2, 1) @ b  # [B, p, q]
    out = gram.reshape(B, n * n)[:, idx.ravel()].reshape(B, idx.shape[0], H, W) * scale

    def backward(g):
        # clamped offsets repeat Gram entries, so accumulate with bincount
        flat = (idx.ravel()[None, :] + (np.arange(B) * n * n)[:, None]).ravel()
        gg = np.bincount(flat, weights=g.reshape(-1) * scale, minlength=B * n * n)
        gg = gg.astype(g.dtype, copy=False).reshape(B, n, n)
        ga = (b @ gg.transpose(0, 2, 1)).reshape(B, C, H, W) if f1.requires_grad else None
        gb = (a @ gg).reshape(B, C, H, W) if f2.requires_grad else None
        return ga, gb

    return make_node(out, (f1, f2), backward, "local_correlation")


def _correlation_shift(f1: Tensor, f2: Tensor, r: int) -> Tensor:
    B, C, H, W = f1.shape
    scale = 1.0 / math.sqrt(C)
    a = f1.data
    bp = np.pad(f2.data, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    D = 2 * r + 1
    out = np.empty((B, D * D, H, W), dtype=a.dtype)
    for dy in range(D):
        for dx in range(D):
            out[:, dy * D + dx] = (a * bp[:, :, dy:dy + H, dx:dx + W]).sum(axis=1) * scale

    def backward(g):
        ga = np.zeros_like(a) if f1.requires_grad else None
        gbp = np.zeros_like(bp) if f2.requires_grad else None
        for dy in range(D):
            for dx in range(D):
                gk = g[:, dy * D + dx][:, None] * scale
                if ga is not None:
                    ga += gk * bp[:, :, dy:dy + H, dx:dx + W]
                if gbp is not None:
                    gbp[:, :, dy:dy + H, dx:dx + W] += gk * a
        gb = _fold_edge_pad(gbp, r) if gbp is not None else None
        return ga, gb

    return make_node(out, (f1, f2), backward, "local_correlation")


def _fold_edge_pad(gp: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of ``np.pad(mode="edge")`` on the last two axes."""
    gp = gp.copy()
    gp[:, :, r, :] += gp[:, :, :r, :].sum(axis=2)
    gp[:, :, -r - 1, :] += gp[:, :, -r:, :].sum(axis=2)
    gp = gp[:, :, r:-r, :]
    gp[:, :, :, r] += gp[:, :, :, :r].sum(axis=3)
    gp[:, :, :, -r - 1] += gp[:, :, :, -r:].sum(axis=3)
    return np.ascontiguousarray(gp[:, :, :, r:-r])

