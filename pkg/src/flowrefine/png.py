"""Minimal PNG codec for 8/16-bit grayscale, RGB and RGBA rasters.

Writing always uses filter type 0 and a single IDAT chunk so output bytes
depend only on the pixel values. Reading handles every filter type and
multiple IDAT chunks but not interlacing or palettes.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FlowFormatError, TruncatedFileError

SIGNATURE = b"\x89PNG\r\n\x1a\n"
# color type -> channel count
_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}
_COLOR_TYPE = {1: 0, 2: 4, 3: 2, 4: 6}


def _chunk(kind: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(kind + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", crc)


def encode_png(pixels: np.ndarray) -> bytes:
    """Encode ``[H,W]`` or ``[H,W,C]`` (C in 1..4) uint8/uint16 pixels."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] not in _COLOR_TYPE:
        raise ValueError(f"PNG pixels must be [H,W] or [H,W,1..4], got {pixels.shape}")
    if arr.dtype == np.uint8:
        depth = 8
    elif arr.dtype == np.uint16:
        depth = 16
    else:
        raise ValueError(f"PNG pixels must be uint8 or uint16, got {arr.dtype}")
    h, w, c = arr.shape
    if h == 0 or w == 0:
        raise ValueError("PNG images must be at least 1x1")
    rows = arr.astype(">u2" if depth == 16 else np.uint8).reshape(h, w * c)
    raw = np.zeros((h, rows.itemsize * w * c + 1), dtype=np.uint8)
    raw[:, 1:] = rows.view(np.uint8).reshape(h, -1)
    ihdr = struct.pack(">IIBBBBB", w, h, depth, _COLOR_TYPE[c], 0, 0, 0)
    return (
        SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(raw.tobytes(), 9))
        + _chunk(b"IEND", b"")
    )


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
    return np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))


def _unfilter(data: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    buf = np.frombuffer(data, dtype=np.uint8)
    if buf.size < h * (stride + 1):
        raise TruncatedFileError(f"PNG image data holds {buf.size} bytes, expected {h * (stride + 1)}")
    buf = buf[: h * (stride + 1)].reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.uint8)
    prior = np.zeros(stride, dtype=np.int32)
    for y in range(h):
        ftype = int(buf[y, 0])
        line = buf[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            # running sum per byte position within a pixel
            pad = (-stride) % bpp
            cur = np.cumsum(np.pad(line, (0, pad)).reshape(-1, bpp), axis=0).reshape(-1)[:stride] & 0xFF
        elif ftype == 2:
            cur = (line + prior) & 0xFF
        elif ftype in (3, 4):
            cur = np.zeros(stride, dtype=np.int32)
            for x0 in range(0, stride, bpp):
                x1 = min(x0 + bpp, stride)
                left = cur[x0 - bpp:x1 - bpp] if x0 else np.zeros(x1 - x0, dtype=np.int32)
                up = prior[x0:x1]
                if ftype == 3:
                    pred = (left + up) >> 1
                else:
                    upleft = prior[x0 - bpp:x1 - bpp] if x0 else np.zeros(x1 - x0, dtype=np.int32)
                    pred = _paeth(left, up, upleft)
                cur[x0:x1] = (line[x0:x1] + pred) & 0xFF
        else:
            raise FlowFormatError(f"PNG row {y} uses unknown filter type {ftype}")
        out[y] = cur
        prior = cur
    return out


def decode_png(blob: bytes) -> np.ndarray:
    """Decode to ``[H,W,C]`` uint8 or uint16 pixels."""
    if len(blob) < len(SIGNATURE) or blob[: len(SIGNATURE)] != SIGNATURE:
        raise FlowFormatError("not a PNG file (bad signature)")
    pos = len(SIGNATURE)
    header = None
    idat = []
    seen_end = False
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise TruncatedFileError("PNG chunk header is truncated")
        length, kind = struct.unpack(">I4s", blob[pos:pos + 8])
        end = pos + 12 + length
        if end > len(blob):
            raise TruncatedFileError(f"PNG chunk {kind!r} is truncated")
        payload = blob[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", blob[end - 4:end])
        if zlib.crc32(kind + payload) & 0xFFFFFFFF != crc:
            raise FlowFormatError(f"PNG chunk {kind!r} fails its CRC check")
        pos = end
        if kind == b"IHDR":
            if length != 13:
                raise FlowFormatError("PNG IHDR has the wrong length")
            header = struct.unpack(">IIBBBBB", payload)
        elif kind == b"IDAT":
            idat.append(payload)
        elif kind == b"IEND":
            seen_end = True
            break
        elif kind == b"PLTE":
            raise FlowFormatError("palette PNGs are not supported")
        elif not kind[0:1].islower():
            raise FlowFormatError(f"unknown critical PNG chunk {kind!r}")
    if header is None:
        raise FlowFormatError("PNG has no IHDR chunk")
    if not seen_end:
        raise TruncatedFileError("PNG ends before its IEND chunk")
    w, h, depth, ctype, comp, filt, interlace = header
    if ctype not in _CHANNELS:
        raise FlowFormatError(f"unsupported PNG color type {ctype}")
    if depth not in (8, 16):
        raise FlowFormatError(f"unsupported PNG bit depth {depth}")
    if comp != 0 or filt != 0:
        raise FlowFormatError("unknown PNG compression or filter method")
    if interlace != 0:
        raise FlowFormatError("interlaced PNGs are not supported")
    if w == 0 or h == 0:
        raise FlowFormatError("PNG has zero width or height")
    try:
        data = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise FlowFormatError(f"PNG image data is corrupt: {exc}") from None
    c = _CHANNELS[ctype]
    bpp = c * depth // 8
    rows = _unfilter(data, h, w * bpp, bpp)
    if depth == 16:
        return rows.view(">u2").astype(np.uint16).reshape(h, w, c)
    return rows.reshape(h, w, c)


def write_png(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(pixels))


def read_png(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except IsADirectoryError:
        raise FlowFormatError(f"{path} is a directory, not a PNG file") from None
    return decode_png(blob)
