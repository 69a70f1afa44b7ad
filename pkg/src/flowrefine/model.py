"""A small recurrent refinement network for optical flow.

Both frames go through a shared strided conv encoder. Starting from zero
flow, each iteration warps the second frame's features by the current
(detached) estimate, builds a local correlation volume against the first
frame's features and, when enabled, the self-cleaning quality map. These
are concatenated with the flow and fed to a convolutional GRU whose hidden
state drives a two-layer head predicting a flow increment.

The GRU uses the classic input/hidden split::

    gx          = conv1x1(x)                 # one input conv -> 3*hidden channels
    z           = sigmoid(gx_z + conv1x1(h))
    r           = sigmoid(gx_r + conv1x1(h))
    q           = tanh(gx_q + conv3x3(r * h))
    h'          = (1 - z) * h + z * q

so toggling the quality map only changes the input conv's channel count.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, PaddingRequiredError, ShapeError
from .flow_ops import FlowField, SciMap, local_correlation, sci_map, warp
from .ops import conv2d, upsample_bilinear
from .tensor import Tensor, concat, get_default_dtype, sigmoid, tanh


@dataclass
class ModelConfig:
    feature_channels: int = 32
    hidden_channels: int = 48
    correlation_radius: int = 3
    iterations: int = 6
    sci_enabled: bool = True
    downsample_factor: int = 4
    head_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        for name in ("feature_channels", "hidden_channels", "head_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.correlation_radius < 1:
            raise ConfigError(f"correlation_radius must be >= 1, got {self.correlation_radius}")
        s = self.downsample_factor
        if s < 1 or s & (s - 1):
            raise ConfigError(f"downsample_factor must be a power of two, got {s}")

    @property
    def gru_input_channels(self) -> int:
        return (2 * self.correlation_radius + 1) ** 2 + 2 + (1 if self.sci_enabled else 0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterationTrace:
    """Per-iteration predictions, upsampled to the input resolution."""

    flows: list = field(default_factory=list)
    sci_maps: Optional[list] = None

    def __len__(self):
        return len(self.flows)

    @property
    def final(self) -> FlowField:
        return self.flows[-1]


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter name so architecture changes elsewhere leave
    # the remaining weights untouched
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _uniform(seed, name, shape, fan_in, dtype, gain=1.0):
    # variance gain**2 / fan_in; gain sqrt(2) keeps rectifier stacks from shrinking
    bound = gain * np.sqrt(3.0 / fan_in)
    return _param_rng(seed, name).uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: ModelConfig, dtype=None) -> dict:
    """Deterministic fan-in uniform initialization from ``config.seed``; biases start at zero."""
    dtype = np.dtype(dtype or get_default_dtype())
    seed = config.seed
    params = {}

    act_gain = np.sqrt(2.0)

    def conv(name, cout, cin, k, gain=1.0):
        fan_in = cin * k * k
        params[f"{name}.weight"] = _uniform(seed, f"{name}.weight", (cout, cin, k, k), fan_in, dtype, gain)
        params[f"{name}.bias"] = np.zeros(cout, dtype=dtype)

    F, Hd = config.feature_channels, config.hidden_channels
    cin = 3
    layout = _encoder_layout(config)
    for i, (cout, _) in enumerate(layout):
        conv(f"enc{i}", cout, cin, 3, act_gain if i < len(layout) - 1 else 1.0)
        cin = cout
    conv("context", Hd, F, 1)

    base_in = config.gru_input_channels - (1 if config.sci_enabled else 0)
    wx = _uniform(seed, "gru.wx.weight", (3 * Hd, base_in, 1, 1), base_in, dtype)
    if config.sci_enabled:
        extra = _uniform(seed, "gru.wx.sci_column", (3 * Hd, 1, 1, 1), base_in, dtype)
        wx = np.concatenate([wx, extra], axis=1)
    params["gru.wx.weight"] = wx
    params["gru.wx.bias"] = np.zeros(3 * Hd, dtype=dtype)
    for gate in ("uz", "ur"):
        params[f"gru.{gate}.weight"] = _uniform(seed, f"gru.{gate}.weight", (Hd, Hd, 1, 1), Hd, dtype)
    params["gru.uq.weight"] = _uniform(seed, "gru.uq.weight", (Hd, Hd, 3, 3), Hd * 9, dtype)

    conv("head0", config.head_channels, Hd, 3, act_gain)
    conv("head1", 2, config.head_channels, 3)
    return {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in params.items()}


def _encoder_layout(config: ModelConfig):
    """(out_channels, stride) per encoder conv; ELU follows all but the last."""
    F = config.feature_channels
    n_down = int(np.log2(config.downsample_factor))
    layers = [(max(F // 2, 1), 2) for _ in range(max(n_down - 1, 0))]
    if n_down:
        layers.append((F, 2))
    else:
        layers.append((F, 1))
    layers.append((F, 1))
    return layers


class FlowModel:
    def __init__(self, config: ModelConfig, params: Optional[dict] = None, dtype=None):
        self.config = config
        self.params = params if params is not None else init_params(config, dtype)
        expected = init_shapes(config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ConfigError(f"missing parameter {name!r}")
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {self.params[name].shape}, expected {shape}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list:
        return [self.params[k] for k in sorted(self.params)]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _conv(self, x, name, stride=1, padding=None):
        w = self.params[f"{name}.weight"]
        if padding is None:
            padding = w.shape[-1] // 2
        return conv2d(x, w, self.params.get(f"{name}.bias"), stride=stride, padding=padding)

    def encode_features(self, image: Tensor) -> Tensor:
        """``[B,3,H,W]`` image in [-1, 1] to ``[B,F,H/s,W/s]`` features."""
        s = self.config.downsample_factor
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"image must be [B,3,H,W], got {image.shape}", axis=1)
        for axis in (2, 3):
            if image.shape[axis] % s:
                raise PaddingRequiredError(
                    f"image axis {axis} has size {image.shape[axis]}, not divisible by {s}; pad the input first",
                    axis=axis,
                )
        x = image
        layout = _encoder_layout(self.config)
        for i, (_, stride) in enumerate(layout):
            x = self._conv(x, f"enc{i}", stride=stride)
            if i < len(layout) - 1:
                x = x.elu()
        return x

    def init_hidden(self, f1: Tensor) -> Tensor:
        return tanh(self._conv(f1, "context"))

    def refine_step(self, f1: Tensor, f2: Tensor, flow_prev: Tensor, hidden: Tensor):
        """One GRU update; returns ``(delta_flow, hidden', SciMap or None)``."""
        if flow_prev.requires_grad:
            raise ValueError("flow_prev must be detached before refine_step")
        f2w = warp(f2, flow_prev)
        corr = local_correlation(f1, f2w, self.config.correlation_radius)
        sci = sci_map(f1, f2w) if self.config.sci_enabled else None
        parts = [corr, flow_prev] + ([sci.map] if sci is not None else [])
        x = concat(parts, axis=1)

        Hd = self.config.hidden_channels
        gx = self._conv(x, "gru.wx")
        gz, gr, gq = gx[:, :Hd], gx[:, Hd:2 * Hd], gx[:, 2 * Hd:]
        p = self.params
        z = sigmoid(gz + conv2d(hidden, p["gru.uz.weight"]))
        r = sigmoid(gr + conv2d(hidden, p["gru.ur.weight"]))
        q = tanh(gq + conv2d(r * hidden, p["gru.uq.weight"], padding=1))
        hidden = hidden + z * (q - hidden)

        delta = self._conv(self._conv(hidden, "head0").elu(), "head1")
        return delta, hidden, sci

    def estimate_flow(self, image1: Tensor, image2: Tensor, iterations: Optional[int] = None) -> IterationTrace:
        """Run the refinement loop from zero flow; one trace entry per iteration."""
        if image1.shape != image2.shape:
            axis = next((i for i, (a, b) in enumerate(zip(image1.shape, image2.shape)) if a != b), None)
            raise ShapeError(f"image pair shapes differ: {image1.shape} vs {image2.shape}", axis=axis)
        n = iterations or self.config.iterations
        s = self.config.downsample_factor
        f1 = self.encode_features(image1)
        f2 = self.encode_features(image2)
        hidden = self.init_hidden(f1)
        B, _, h, w = f1.shape
        flow = Tensor.zeros((B, 2, h, w), dtype=f1.dtype)
        trace = IterationTrace(flows=[], sci_maps=[] if self.config.sci_enabled else None)
        for _ in range(n):
            flow_prev = flow.detach()
            delta, hidden, sci = self.refine_step(f1, f2, flow_prev, hidden)
            flow = flow_prev + delta
            up = upsample_bilinear(flow, s) * float(s) if s > 1 else flow
            trace.flows.append(FlowField(up))
            if sci is not None:
                trace.sci_maps.append(sci)
        return trace


def init_shapes(config: ModelConfig) -> dict:
    """Expected parameter shapes without drawing any random numbers."""
    F, Hd = config.feature_channels, config.hidden_channels
    shapes = {}
    cin = 3
    for i, (cout, _) in enumerate(_encoder_layout(config)):
        shapes[f"enc{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"enc{i}.bias"] = (cout,)
        cin = cout
    shapes["context.weight"] = (Hd, F, 1, 1)
    shapes["context.bias"] = (Hd,)
    shapes["gru.wx.weight"] = (3 * Hd, config.gru_input_channels, 1, 1)
    shapes["gru.wx.bias"] = (3 * Hd,)
    shapes["gru.uz.weight"] = (Hd, Hd, 1, 1)
    shapes["gru.ur.weight"] = (Hd, Hd, 1, 1)
    shapes["gru.uq.weight"] = (Hd, Hd, 3, 3)
    shapes["head0.weight"] = (config.head_channels, Hd, 3, 3)
    shapes["head0.bias"] = (config.head_channels,)
    shapes["head1.weight"] = (2, config.head_channels, 3, 3)
    shapes["head1.bias"] = (2,)
    return shapes


def image_to_tensor(images, dtype=None) -> Tensor:
    """``[H,W,3]`` or ``[B,H,W,3]`` images (uint8 or float in [0,1]) to ``[B,3,H,W]`` in [-1,1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"images must be [B,H,W,3], got {arr.shape}", axis=arr.ndim - 1)
    dtype = np.dtype(dtype or get_default_dtype())
    x = arr.astype(dtype) / 255.0 if arr.dtype == np.uint8 else arr.astype(dtype)
    return Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)) * 2.0 - 1.0, dtype=dtype)
