"""Flow file formats (Middlebury ``.flo``, KITTI 16-bit PNG), RGB image IO
and the flow color wheel.

``.flo`` layout, all little-endian::

    float32 202021.25        magic tag ("PIEH")
    int32   width
    int32   height
    float32 data[height][width][2]   interleaved (u, v), row-major

KITTI flow PNG: 16-bit RGB with ``u = (R - 2**15) / 64``,
``v = (G - 2**15) / 64`` and ``B`` nonzero where the pixel is valid.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .errors import FlowFormatError, TruncatedFileError
from .flow_ops import FlowField
from .png import decode_png, encode_png, read_png, write_png

FLO_MAGIC = 202021.25
_FLO_MAGIC_BYTES = struct.pack("<f", FLO_MAGIC)
# sanity bound on header dimensions before allocating
_MAX_SIDE = 1 << 15
KITTI_OFFSET = 2 ** 15
KITTI_SCALE = 64.0


def _single_hw2(flow) -> np.ndarray:
    if isinstance(flow, FlowField):
        if flow.shape[0] != 1:
            raise ValueError(f"expected a single flow field, got batch of {flow.shape[0]}")
        return flow.to_hw2()
    arr = np.asarray(flow)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"flow array must be [H,W,2], got {arr.shape}")
    return arr


def encode_flo(flow) -> bytes:
    arr = _single_hw2(flow)
    h, w = arr.shape[:2]
    body = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _FLO_MAGIC_BYTES + struct.pack("<ii", w, h) + body


def decode_flo(blob: bytes) -> FlowField:
    if len(blob) < 12:
        raise TruncatedFileError(f".flo header needs 12 bytes, file has {len(blob)}")
    if blob[:4] != _FLO_MAGIC_BYTES:
        raise FlowFormatError(f"bad .flo magic {blob[:4]!r}")
    w, h = struct.unpack("<ii", blob[4:12])
    if not (0 < w <= _MAX_SIDE and 0 < h <= _MAX_SIDE):
        raise FlowFormatError(f"implausible .flo dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(blob) < need:
        raise TruncatedFileError(f".flo payload for {w}x{h} needs {need} bytes, file has {len(blob)}")
    if len(blob) > need:
        raise FlowFormatError(f".flo file has {len(blob) - need} trailing bytes")
    arr = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
    return FlowField.from_hw2(arr, dtype=np.float32)


def write_flo(path, flow) -> None:
    """Write one ``[1,2,H,W]`` FlowField (or ``[H,W,2]`` array) as float32 ``.flo``."""
    Path(path).write_bytes(encode_flo(flow))


def read_flo(path) -> FlowField:
    return decode_flo(_read_bytes(path))


def encode_kitti_png(flow, valid: Optional[np.ndarray] = None) -> bytes:
    """Quantize to 1/64 px (round half to even) and pack as a 16-bit PNG.

    ``valid`` defaults to the FlowField's mask, or all valid.
    """
    arr = _single_hw2(flow).astype(np.float64)
    if valid is None and isinstance(flow, FlowField) and flow.valid is not None:
        valid = flow.valid[0, 0]
    h, w = arr.shape[:2]
    valid = np.ones((h, w), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(h, w)
    q = np.clip(np.round(arr * KITTI_SCALE) + KITTI_OFFSET, 0, 65535).astype(np.uint16)
    pixels = np.concatenate([q, valid[..., None].astype(np.uint16)], axis=2)
    return encode_png(pixels)


def decode_kitti_png(blob: bytes) -> FlowField:
    pixels = decode_png(blob)
    if pixels.dtype != np.uint16:
        raise FlowFormatError(f"KITTI flow PNG must be 16-bit, got {pixels.dtype.itemsize * 8}-bit")
    if pixels.shape[2] != 3:
        raise FlowFormatError(f"KITTI flow PNG must have 3 channels, got {pixels.shape[2]}")
    flow = (pixels[..., :2].astype(np.float32) - KITTI_OFFSET) / np.float32(KITTI_SCALE)
    valid = pixels[..., 2] > 0
    return FlowField.from_hw2(flow, valid=valid, dtype=np.float32)


def write_kitti_png(path, flow, valid: Optional[np.ndarray] = None) -> None:
    Path(path).write_bytes(encode_kitti_png(flow, valid))


def read_kitti_png(path) -> FlowField:
    return decode_kitti_png(_read_bytes(path))


def read_flow(path) -> FlowField:
    """Dispatch on extension: ``.flo`` or ``.png`` (KITTI encoding)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".flo":
        return read_flo(path)
    if suffix == ".png":
        return read_kitti_png(path)
    raise FlowFormatError(f"unknown flow file extension {suffix!r} for {path}")


def write_flow(path, flow) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".flo":
        write_flo(path, flow)
    elif suffix == ".png":
        write_kitti_png(path, flow)
    else:
        raise FlowFormatError(f"unknown flow file extension {suffix!r} for {path}")


def read_image(path) -> np.ndarray:
    """8-bit RGB ``[H,W,3]`` from a PNG (gray is replicated, alpha dropped)."""
    px = read_png(path)
    if px.dtype == np.uint16:
        px = (px >> 8).astype(np.uint8)
    c = px.shape[2]
    if c in (1, 2):
        px = np.repeat(px[..., :1], 3, axis=2)
    return np.ascontiguousarray(px[..., :3])


def write_image(path, image: np.ndarray) -> None:
    """Write ``[H,W]`` or ``[H,W,3]`` uint8, or float in [0, 1], as PNG."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    write_png(path, img)


def _read_bytes(path) -> bytes:
    p = Path(path)
    if p.is_dir():
        raise FlowFormatError(f"{p} is a directory")
    return p.read_bytes()


def flow_to_hsv(flow, max_magnitude: Optional[float] = None) -> np.ndarray:
    """``[H,W,3]`` HSV in [0, 1]: hue from direction, saturation from magnitude.

    Hue is ``atan2(v, u) / 2pi`` wrapped to [0, 1), so opposite directions
    sit half a turn apart. Saturation is ``|f| / max_magnitude`` clipped to
    1 (per-image maximum when ``max_magnitude`` is None); value is 1.
    """
    arr = _single_hw2(flow).astype(np.float64)
    u, v = arr[..., 0], arr[..., 1]
    mag = np.hypot(u, v)
    scale = float(mag.max()) if max_magnitude is None else float(max_magnitude)
    hue = np.mod(np.arctan2(v, u) / (2 * np.pi), 1.0)
    sat = np.zeros_like(mag) if scale <= 0 else np.minimum(mag / scale, 1.0)
    return np.stack([hue, sat, np.ones_like(mag)], axis=-1)


def flow_to_color(flow, max_magnitude: Optional[float] = None) -> np.ndarray:
    """Render flow as 8-bit RGB on the color wheel; zero flow is white."""
    rgb = hsv_to_rgb(flow_to_hsv(flow, max_magnitude))
    return np.round(rgb * 255).astype(np.uint8)
