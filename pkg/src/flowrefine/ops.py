"""Image-shaped differentiable operations on ``[B, C, H, W]`` tensors."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .errors import NonFiniteError, ShapeError
from .tensor import Tensor, make_node


def _require_rank(t: Tensor, rank: int, name: str) -> None:
    if t.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {t.shape}", axis=None)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """``[B, C, Hp, Wp]`` -> ``[B, C*kh*kw, Ho*Wo]`` patch matrix."""
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo), Ho, Wo


def _correlate(xp: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    """Unpadded strided cross-correlation of ``xp`` with ``k [O,C,kh,kw]``."""
    O, C, kh, kw = k.shape
    B = xp.shape[0]
    if kh == 1 and kw == 1 and stride == 1:
        H, W = xp.shape[2:]
        return (k.reshape(O, C) @ xp.reshape(B, C, H * W)).reshape(B, O, H, W)
    cols, Ho, Wo = _im2col(xp, kh, kw, stride)
    return (k.reshape(O, C * kh * kw) @ cols).reshape(B, O, Ho, Wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``[B, Cin, H, W]``, ``kernel`` is ``[Cout, Cin, kh, kw]`` and the
    optional ``bias`` is ``[Cout]``. Output spatial size is
    ``(H + 2*padding - kh) // stride + 1``.
    """
    _require_rank(x, 4, "conv2d input")
    _require_rank(kernel, 4, "conv2d kernel")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d: input has {C} channels but kernel expects {Ck}", axis=1)
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {Hp}", axis=2)
    if kw > Wp:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {Wp}", axis=3)
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {O} output channels", axis=0)

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    one_by_one = kh == 1 and kw == 1 and stride == 1
    if one_by_one:
        cols = None
        out = _correlate(xp, kernel.data, stride)
    else:
        cols, Ho, Wo = _im2col(xp, kh, kw, stride)
        out = (kernel.data.reshape(O, C * kh * kw) @ cols).reshape(B, O, Ho, Wo)
    if bias is not None:
        out += bias.data[:, None, None]
    Ho, Wo = out.shape[2:]

    def backward(g):
        gx = gk = gb = None
        if kernel.requires_grad:
            src = xp.reshape(B, C, -1) if one_by_one else cols
            gk = np.einsum("bop,bkp->ok", g.reshape(B, O, -1), src, optimize=True)
            gk = gk.reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            # transposed convolution: dilate by the stride, zero-pad, correlate
            # with the flipped kernel
            if stride > 1:
                gd = np.zeros((B, O, (Ho - 1) * stride + 1, (Wo - 1) * stride + 1), dtype=g.dtype)
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            kflip = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            lo_h, lo_w = kh - 1 - padding, kw - 1 - padding
            if lo_h >= 0 and lo_w >= 0:
                # pad so the result lands exactly on the unpadded input grid
                rem_h = (Hp - kh) % stride
                rem_w = (Wp - kw) % stride
                gd = np.pad(gd, ((0, 0), (0, 0), (lo_h, lo_h + rem_h), (lo_w, lo_w + rem_w)))
                gx = _correlate(gd, kflip, 1)
            else:
                gd = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                full = _correlate(gd, kflip, 1)
                gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
                gxp[:, :, :full.shape[2], :full.shape[3]] = full
                gx = gxp[:, :, padding:padding + H, padding:padding + W]
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, backward, "conv2d")


def _corner_weights(coord: np.ndarray, size: int):
    """Clamp ``coord`` to ``[0, size-1]`` and split into lower index and weight.

    Returns ``(i0, i1, w, inside)`` where the interpolated value is
    ``(1-w)*v[i0] + w*v[i1]`` and ``inside`` marks coordinates that were not
    clamped (the derivative w.r.t. the coordinate is zero elsewhere).
    """
    c = np.clip(coord, 0, size - 1)
    inside = (coord >= 0) & (coord <= size - 1)
    if size == 1:
        i0 = np.zeros(coord.shape, dtype=np.int64)
        return i0, i0, np.zeros_like(c), np.zeros(coord.shape, dtype=bool)
    i0 = np.minimum(np.floor(c).astype(np.int64), size - 2)
    return i0, i0 + 1, c - i0, inside


def bilinear_sample(source: Tensor, coords: Tensor) -> Tensor:
    """Sample ``source [B,C,H,W]`` at absolute pixel ``coords [B,2,H',W']``.

    Channel 0 of ``coords`` is the horizontal (x, column) position and
    channel 1 the vertical (y, row) position. Coordinates outside the image
    are clamped to the border. Differentiable w.r.t. both inputs.
    """
    _require_rank(source, 4, "bilinear_sample source")
    _require_rank(coords, 4, "bilinear_sample coords")
    B, C, H, W = source.shape
    if coords.shape[0] != B:
        raise ShapeError(f"bilinear_sample: batch {coords.shape[0]} vs source batch {B}", axis=0)
    if coords.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: coords need 2 channels, got {coords.shape[1]}", axis=1)
    cd = coords.data
    if not np.all(np.isfinite(cd)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(cd))[0])
        raise NonFiniteError(f"bilinear_sample: non-finite coordinate at index {bad}", index=bad)
    Ho, Wo = cd.shape[2], cd.shape[3]
    P = Ho * Wo
    x0, x1, wx, in_x = _corner_weights(cd[:, 0].reshape(B, P), W)
    y0, y1, wy, in_y = _corner_weights(cd[:, 1].reshape(B, P), H)

    base = (np.arange(B) * H * W)[:, None]
    idx = [base + y0 * W + x0, base + y0 * W + x1, base + y1 * W + x0, base + y1 * W + x1]
    wts = [(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx]
    rows = np.tile(np.arange(B * P), 4)
    mat = sparse.csr_matrix(
        (np.concatenate([w.ravel() for w in wts]), (rows, np.concatenate([i.ravel() for i in idx]))),
        shape=(B * P, B * H * W),
    )
    # source as [B*H*W, C]
    src = source.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    out = np.asarray(mat @ src, dtype=source.dtype).reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gs = gc = None
        g2 = g.transpose(0, 2, 3, 1).reshape(B * P, C)
        if source.requires_grad:
            gs = np.asarray(mat.T @ g2, dtype=g.dtype).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        if coords.requires_grad:
            v00, v01, v10, v11 = (src[i.ravel()].reshape(B, P, C) for i in idx)
            gr = g2.reshape(B, P, C)
            wy_, wx_ = wy[..., None], wx[..., None]
            dx = ((1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)) * gr
            dy = ((1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)) * gr
            gcx = dx.sum(axis=2) * in_x
            gcy = dy.sum(axis=2) * in_y
            gc = np.stack([gcx, gcy], axis=1).reshape(B, 2, Ho, Wo).astype(g.dtype, copy=False)
        return gs, gc

    return make_node(out, (source, coords), backward, "bilinear_sample")


def _upsample_matrix(n: int, factor: int, dtype) -> np.ndarray:
    """Linear interpolation matrix ``[n*factor, n]`` with half-pixel centers."""
    out = np.arange(n * factor)
    src = (out + 0.5) / factor - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), max(n - 2, 0))
    w = src - i0
    m = np.zeros((n * factor, n), dtype=dtype)
    m[out, i0] += 1 - w
    if n > 1:
        m[out, i0 + 1] += w
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear resize by an integer factor (half-pixel aligned, edge clamped)."""
    _require_rank(x, 4, "upsample input")
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x * 1.0
    _, _, H, W = x.shape
    uh = _upsample_matrix(H, factor, x.dtype)
    uw = _upsample_matrix(W, factor, x.dtype)
    out = np.einsum("ph,bchw,qw->bcpq", uh, x.data, uw, optimize=True)

    def backward(g):
        return (np.einsum("ph,bcpq,qw->bchw", uh, g, uw, optimize=True),)

    return make_node(out, (x,), backward, "upsample_bilinear")
