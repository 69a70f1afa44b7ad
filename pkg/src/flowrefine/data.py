"""Synthetic image pairs with analytic flow, and on-disk dataset ingestion.

Synthetic pairs are rendered from a continuous texture ``T``: frame one is
``T`` sampled on the pixel grid, frame two is ``T`` pulled back through an
affine map ``p -> A p + b``. The forward flow ``(A - I) p + b`` is therefore
exact at every pixel, with no interpolation involved.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, LayoutError
from .flow_ops import FlowField

TEXTURES = ("smooth", "checker")
TRANSFORMS = ("translation", "affine")


@dataclass
class SynthConfig:
    height: int = 32
    width: int = 32
    max_displacement: float = 4.0
    texture: str = "smooth"
    transform: str = "translation"
    seed: int = 0
    count: int = 1000
    # smooth-noise parameters
    n_waves: int = 12
    max_frequency: float = 0.2

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture {self.texture!r}; expected one of {TEXTURES}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}; expected one of {TRANSFORMS}")
        if self.height < 2 or self.width < 2:
            raise ConfigError("synthetic images need at least 2x2 pixels")
        if not 0 <= self.max_displacement < min(self.height, self.width) / 2:
            raise ConfigError(
                f"max_displacement {self.max_displacement} must be below half the smallest image side"
            )


@dataclass
class FlowSample:
    """One frame pair. Images are ``[H,W,3]``: uint8 when read from disk,
    float in [0, 1] when synthesized."""

    image1: np.ndarray
    image2: np.ndarray
    flow_gt: Optional[FlowField] = None
    source_path: Optional[str] = None
    format: str = "synthetic"
    texture: Optional[Callable] = field(default=None, repr=False, compare=False)
    transform: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.image1.shape != self.image2.shape:
            raise ValueError(f"image shapes differ: {self.image1.shape} vs {self.image2.shape}")
        if self.flow_gt is not None:
            _, _, h, w = self.flow_gt.shape
            if (h, w) != self.image1.shape[:2]:
                raise ValueError(f"flow is {h}x{w} but images are {self.image1.shape[:2]}")


def smooth_texture(rng: np.random.Generator, n_waves: int, max_frequency: float) -> Callable:
    """Random band-limited RGB texture, a sum of plane waves with values in [0, 1]."""
    freq = rng.uniform(-max_frequency, max_frequency, size=(3, n_waves, 2))
    # keep at least a little spatial variation in every wave
    freq[..., 0] += np.sign(freq[..., 0]) * 0.02
    phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
    amp = rng.uniform(0.2, 1.0, size=(3, n_waves))
    amp *= 0.5 / amp.sum(axis=1, keepdims=True)

    def texture(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        arg = 2 * np.pi * (freq[None, None, :, :, 0] * x[..., None, None] + freq[None, None, :, :, 1] * y[..., None, None])
        return 0.5 + (amp * np.cos(arg + phase)).sum(axis=-1)

    return texture


def checker_texture(rng: np.random.Generator, period: Optional[float] = None) -> Callable:
    period = period or rng.uniform(3.0, 6.0)
    lo, hi = rng.uniform(0.0, 0.3, 3), rng.uniform(0.7, 1.0, 3)

    def texture(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        parity = (np.floor(x / period) + np.floor(y / period)) % 2
        return lo + (hi - lo) * parity[..., None]

    return texture


def affine_flow(A: np.ndarray, b: np.ndarray, height: int, width: int) -> np.ndarray:
    """Forward flow ``(A - I) p + b`` on the pixel grid, as ``[H, W, 2]``."""
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    p = np.stack([xs, ys], axis=-1)
    return p @ (np.asarray(A) - np.eye(2)).T + np.asarray(b)


def render_pair(texture: Callable, A, b, height: int, width: int):
    """Render ``(I1, I2, flow)`` for the map ``p -> A p + b``.

    ``I2(q) = T(A^-1 (q - b))`` so that ``I2(p + flow(p)) = I1(p)`` exactly.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    img1 = texture(xs, ys)
    q = np.stack([xs, ys], axis=-1) - b
    src = q @ np.linalg.inv(A).T
    img2 = texture(src[..., 0], src[..., 1])
    return img1, img2, affine_flow(A, b, height, width)


def sample_transform(config: SynthConfig, rng: np.random.Generator):
    d = config.max_displacement
    if config.transform == "translation":
        return np.eye(2), rng.uniform(-d, d, size=2)
    # small rotation/scale about the image center, then bound the displacement
    theta = rng.uniform(-0.08, 0.08)
    scale = rng.uniform(0.95, 1.05)
    R = scale * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    c = np.array([(config.width - 1) / 2, (config.height - 1) / 2])
    b = c - R @ c + rng.uniform(-d, d, size=2)
    corners = np.array([[0, 0], [config.width - 1, 0], [0, config.height - 1], [config.width - 1, config.height - 1]])
    peak = np.abs(corners @ (R - np.eye(2)).T + b).max()
    if peak > d:
        k = d / peak
        R = np.eye(2) + k * (R - np.eye(2))
        b = k * b
    return R, b


def synth_pair(config: SynthConfig, index: int, transform: Optional[tuple] = None) -> FlowSample:
    """Deterministic pair number ``index`` for ``config``.

    ``transform`` overrides the sampled ``(A, b)``; the texture is still
    drawn from ``(seed, index)``.
    """
    rng = np.random.default_rng([int(config.seed), int(index)])
    if config.texture == "smooth":
        texture = smooth_texture(rng, config.n_waves, config.max_frequency)
    else:
        texture = checker_texture(rng)
    A, b = transform if transform is not None else sample_transform(config, rng)
    img1, img2, flow = render_pair(texture, A, b, config.height, config.width)
    return FlowSample(
        image1=img1,
        image2=img2,
        flow_gt=FlowField.from_hw2(flow, dtype=np.float64),
        source_path=None,
        format="synthetic",
        texture=texture,
        transform=(np.asarray(A), np.asarray(b)),
    )


def synth_batch(config: SynthConfig, indices):
    """Stack pairs into ``(img1 [B,H,W,3], img2, flow [B,2,H,W])`` float64 arrays."""
    samples = [synth_pair(config, i) for i in indices]
    img1 = np.stack([s.image1 for s in samples])
    img2 = np.stack([s.image2 for s in samples])
    flow = np.concatenate([s.flow_gt.flow.data for s in samples])
    return img1, img2, flow


_POOL_CACHE: dict = {}


def synth_pool(config: SynthConfig):
    """All ``config.count`` pairs as stacked arrays, memoized per config."""
    key = tuple(sorted(vars(config).items()))
    if key not in _POOL_CACHE:
        if len(_POOL_CACHE) > 8:
            _POOL_CACHE.clear()
        _POOL_CACHE[key] = synth_batch(config, range(config.count))
    return _POOL_CACHE[key]


LAYOUTS = ("sintel_like", "kitti_like", "flo_pairs")
_PAIR_FILE = re.compile(r"^(?P<stem>.+)_(?P<kind>img1|img2|flow)\.(?P<ext>png|flo)$")
_KITTI_FRAME = re.compile(r"^(?P<stem>\d+)_(?P<frame>10|11)\.png$")
_SINTEL_FRAME = re.compile(r"^frame_(?P<num>\d+)\.png$")


@dataclass(frozen=True)
class SampleDescriptor:
    """Paths of one frame pair; loading is deferred until :meth:`load`."""

    image1: Path
    image2: Path
    flow: Optional[Path]
    format: str

    @property
    def has_ground_truth(self) -> bool:
        return self.flow is not None

    def load(self) -> FlowSample:
        from .flow_io import read_flow, read_image

        flow = read_flow(self.flow) if self.flow is not None else None
        return FlowSample(
            image1=read_image(self.image1),
            image2=read_image(self.image2),
            flow_gt=flow,
            source_path=str(self.image1),
            format=self.format,
        )


def _layout_markers(root: Path) -> dict:
    """Top-level entries that identify each layout."""
    marks = {name: [] for name in LAYOUTS}
    for p in sorted(root.iterdir()):
        if p.is_dir() and p.name in ("clean", "final", "flow"):
            marks["sintel_like"].append(p)
        elif p.is_dir() and p.name in ("image_2", "flow_occ", "flow_noc"):
            marks["kitti_like"].append(p)
        elif p.is_file() and _PAIR_FILE.match(p.name):
            marks["flo_pairs"].append(p)
    return marks


def ingest_dataset(root, layout: str) -> list:
    """Index a dataset directory as sorted :class:`SampleDescriptor` objects.

    ``sintel_like``: ``clean/<scene>/frame_NNNN.png`` with
    ``flow/<scene>/frame_NNNN.flo`` for consecutive frames.
    ``kitti_like``: ``image_2/NNNNNN_10.png`` and ``NNNNNN_11.png`` with
    ``flow_occ/NNNNNN_10.png``.
    ``flo_pairs``: flat ``<name>_img1.png``, ``<name>_img2.png`` and
    ``<name>_flow.flo``.

    Pairs without a flow file are kept as inference-only samples. Entries
    belonging to a different layout raise :class:`LayoutError` naming the
    first one found.
    """
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown dataset layout {layout!r}; expected one of {LAYOUTS}")
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if not root.is_dir():
        raise NotADirectoryError(f"dataset root {root} is not a directory")
    marks = _layout_markers(root)
    foreign = sorted(p for name, paths in marks.items() if name != layout for p in paths)
    if foreign:
        raise LayoutError(f"{foreign[0]} does not belong to a {layout} dataset", path=foreign[0])
    if layout == "sintel_like":
        return _ingest_sintel(root)
    if layout == "kitti_like":
        return _ingest_kitti(root)
    return _ingest_flo_pairs(root)


def _ingest_sintel(root: Path) -> list:
    frames_root = root / "clean"
    if not frames_root.is_dir():
        return []
    out = []
    for scene in sorted(p for p in frames_root.iterdir() if p.is_dir()):
        frames = sorted(
            (int(m.group("num")), p) for p in scene.iterdir() if (m := _SINTEL_FRAME.match(p.name))
        )
        for (n1, p1), (n2, p2) in zip(frames, frames[1:]):
            if n2 != n1 + 1:
                continue
            flow = root / "flow" / scene.name / (p1.stem + ".flo")
            out.append(SampleDescriptor(p1, p2, flow if flow.is_file() else None, "sintel_like"))
    return out


def _ingest_kitti(root: Path) -> list:
    img_root = root / "image_2"
    if not img_root.is_dir():
        return []
    frames = {}
    for p in sorted(img_root.iterdir()):
        m = _KITTI_FRAME.match(p.name)
        if m:
            frames.setdefault(m.group("stem"), {})[m.group("frame")] = p
    out = []
    for stem in sorted(frames):
        pair = frames[stem]
        if "10" not in pair or "11" not in pair:
            lone = pair.get("10") or pair.get("11")
            raise LayoutError(f"{lone} has no partner frame", path=lone)
        flow = root / "flow_occ" / f"{stem}_10.png"
        out.append(SampleDescriptor(pair["10"], pair["11"], flow if flow.is_file() else None, "kitti_like"))
    return out


def _ingest_flo_pairs(root: Path) -> list:
    groups = {}
    for p in sorted(root.iterdir()):
        m = _PAIR_FILE.match(p.name)
        if m and p.is_file():
            groups.setdefault(m.group("stem"), {})[m.group("kind")] = p
    out = []
    for stem in sorted(groups):
        g = groups[stem]
        if "img1" not in g or "img2" not in g:
            first = sorted(g.values())[0]
            raise LayoutError(f"{first} is not part of a complete image pair", path=first)
        out.append(SampleDescriptor(g["img1"], g["img2"], g.get("flow"), "flo_pairs"))
    return out
