"""Run configuration, optimizer, training loop and evaluation helpers."""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import save_checkpoint
from .data import SynthConfig, ingest_dataset, synth_pool
from .errors import ConfigError, NonFiniteError
from .flow_ops import FlowField
from .losses import LossConfig, apply_confidence_schedule
from .metrics import EvalReport, evaluate, merge_reports
from .model import FlowModel, IterationTrace, ModelConfig, image_to_tensor
from .render import training_curve
from .tensor import Tensor, default_dtype, no_grad

VARIANTS = ("baseline", "sci", "sci_rfl")
SCHEDULES = ("constant", "linear")
OUTPUT_ENV = "FLOWREFINE_OUTPUT_DIR"


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass
class RunConfig:
    """Everything needed to reproduce a run, as one flat record."""

    variant: str = "sci"
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    momentum: float = 0.9
    clip: float = 1.0
    lr_schedule: str = "constant"
    float64: bool = False
    eval_every: int = 500
    eval_count: int = 200
    # model
    feature_channels: int = 32
    hidden_channels: int = 48
    head_channels: int = 32
    correlation_radius: int = 3
    iterations: int = 6
    downsample_factor: int = 4
    # loss
    gamma: float = 0.8
    alpha: float = 1.0
    beta: float = 1.0
    loss_variant: str = "d"
    confidence_source: str = "final_iteration"
    # data
    dataset: str = ""
    layout: str = "flo_pairs"
    data_seed: int = 0
    train_count: int = 1000
    height: int = 32
    width: int = 32
    max_displacement: float = 4.0
    texture: str = "smooth"
    transform: str = "translation"
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}; expected one of {SCHEDULES}")
        for name in ("steps", "eval_every", "eval_count"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0 or self.clip <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0, clip > 0 and 0 <= momentum < 1")
        # surface component-level validation early
        self.model_config()
        LossConfig(self.gamma, self.alpha, self.beta, self.loss_variant, self.confidence_source)
        if not self.dataset:
            self.synth_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            feature_channels=self.feature_channels,
            hidden_channels=self.hidden_channels,
            correlation_radius=self.correlation_radius,
            iterations=self.iterations,
            sci_enabled=self.variant != "baseline",
            downsample_factor=self.downsample_factor,
            head_channels=self.head_channels,
            seed=self.seed,
        )

    def loss_config(self) -> LossConfig:
        if self.variant == "sci_rfl":
            return LossConfig(self.gamma, self.alpha, self.beta, self.loss_variant, self.confidence_source)
        return LossConfig(self.gamma, self.alpha, self.beta, "a", "none")

    def synth_config(self, held_out: bool = False) -> SynthConfig:
        return SynthConfig(
            height=self.height,
            width=self.width,
            max_displacement=self.max_displacement,
            texture=self.texture,
            transform=self.transform,
            # the held-out stream never overlaps the training stream
            seed=self.data_seed + (1_000_003 if held_out else 0),
            count=self.eval_count if held_out else self.train_count,
        )

    @property
    def dtype(self):
        return np.float64 if self.float64 else np.float32

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind in ("bool", bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def parse_overrides(pairs: dict) -> dict:
    """Validate keys and convert string values to the field types."""
    out = {}
    for key, raw in pairs.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _convert(key, raw) if isinstance(raw, str) else raw
    return out


def parse_config_text(text: str) -> dict:
    """``key=value`` lines; ``#`` starts a comment; later keys win."""
    pairs = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return parse_overrides(pairs)


def load_run_config(path=None, overrides: Optional[dict] = None, env=None) -> RunConfig:
    """File values, then the output-dir environment variable, then ``overrides``."""
    values = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
    env = os.environ if env is None else env
    if env.get(OUTPUT_ENV):
        values["output_dir"] = env[OUTPUT_ENV]
    values.update(parse_overrides(overrides or {}))
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


class SGDMomentum:
    """Heavy-ball gradient descent with global gradient-norm clipping."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, clip: float = 1.0):
        self.params = params
        self.lr, self.momentum, self.clip = lr, momentum, clip
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for k in sorted(self.params):
            g = self.params[k].grad
            if g is not None:
                total += float(np.sum(np.square(g, dtype=np.float64)))
        return math.sqrt(total)

    def step(self, lr_scale: float = 1.0) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise NonFiniteError("gradient norm is not finite")
        scale = min(1.0, self.clip / norm) if norm > 0 else 1.0
        lr = self.lr * lr_scale
        for k in sorted(self.params):
            p = self.params[k]
            if p.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v += p.grad * scale
            p.data = p.data - (lr * v).astype(p.dtype, copy=False)
        return norm


def load_arrays(config: RunConfig, held_out: bool = False):
    """``(img1 [N,H,W,3], img2, flow [N,2,H,W], valid [N,1,H,W] or None)``."""
    if not config.dataset:
        i1, i2, fl = synth_pool(config.synth_config(held_out))
        return i1, i2, fl, None
    index = [d for d in ingest_dataset(config.dataset, config.layout) if d.has_ground_truth]
    if not index:
        raise ConfigError(f"dataset {config.dataset} has no samples with ground truth")
    samples = [d.load() for d in index]
    shapes = {s.image1.shape for s in samples}
    if len(shapes) != 1:
        raise ConfigError(f"dataset images differ in size ({sorted(shapes)}); training needs one size")
    img1 = np.stack([s.image1 for s in samples])
    img2 = np.stack([s.image2 for s in samples])
    flow = np.concatenate([s.flow_gt.flow.data.astype(np.float64) for s in samples])
    valid = np.concatenate([s.flow_gt.valid_mask() for s in samples])
    return img1, img2, flow, valid


def evaluate_arrays(model: FlowModel, img1, img2, flow, valid=None, chunk: int = 50, relative: bool = True) -> EvalReport:
    """Pooled EPE / Fl-all / per-iteration EPE over stacked samples."""
    reports = []
    dtype = model.dtype
    with no_grad():
        for s in range(0, len(img1), chunk):
            sl = slice(s, s + chunk)
            trace = model.estimate_flow(image_to_tensor(img1[sl], dtype), image_to_tensor(img2[sl], dtype))
            gt = FlowField(Tensor(flow[sl], dtype=np.float64), None if valid is None else valid[sl])
            pred = FlowField(Tensor(trace.final.flow.data, dtype=np.float64))
            flows = [FlowField(Tensor(f.flow.data, dtype=np.float64)) for f in trace.flows]
            reports.append(evaluate(pred, gt, IterationTrace(flows), relative=relative))
    return merge_reports(reports)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def train(config: RunConfig, log: Optional[Callable[[str], None]] = None, write_outputs: bool = True) -> dict:
    """Train one model; returns ``{"model", "report", "log_lines", "run_dir"}``.

    Every log line is also passed to ``log``. Raises :class:`DivergenceError`
    on a non-finite loss or gradient.
    """
    lines = []

    def emit(line):
        lines.append(line)
        if log is not None:
            log(line)

    run_dir = Path(config.output_dir)
    with default_dtype(config.dtype):
        model = FlowModel(config.model_config(), dtype=config.dtype)
        loss_cfg = config.loss_config()
        img1, img2, flow, valid = load_arrays(config)
        ev = load_arrays(config, held_out=True) if not config.dataset else (img1, img2, flow, valid)
        opt = SGDMomentum(model.params, config.lr, config.momentum, config.clip)
        rng = np.random.default_rng([config.seed, 7])
        emit(f"variant={config.variant} params={model.num_parameters()} train_samples={len(img1)} eval_samples={len(ev[0])}")
        curve_steps, curve_loss, eval_steps, eval_epe = [], [], [], []
        for step in range(1, config.steps + 1):
            idx = rng.integers(0, len(img1), config.batch_size)
            try:
                trace = model.estimate_flow(image_to_tensor(img1[idx]), image_to_tensor(img2[idx]))
                gt = FlowField(Tensor(flow[idx]), None if valid is None else valid[idx])
                loss = apply_confidence_schedule(trace, gt, loss_cfg)
            except NonFiniteError as exc:
                emit(f"step={step} diverged=1")
                raise DivergenceError(f"non-finite values in the forward pass at step {step}: {exc}", step=step) from None
            value = loss.item()
            if not math.isfinite(value):
                emit(f"step={step} loss={value} diverged=1")
                raise DivergenceError(f"non-finite loss at step {step}", step=step)
            opt.zero_grad()
            loss.backward()
            scale = 1.0 - (step - 1) / config.steps if config.lr_schedule == "linear" else 1.0
            try:
                gnorm = opt.step(scale)
            except NonFiniteError:
                emit(f"step={step} loss={_fmt(value)} grad_norm=nan diverged=1")
                raise DivergenceError(f"non-finite gradient at step {step}", step=step) from None
            emit(f"step={step} loss={_fmt(value)} grad_norm={_fmt(gnorm)} lr={_fmt(config.lr * scale)}")
            curve_steps.append(step)
            curve_loss.append(value)
            if config.eval_every and step % config.eval_every == 0 and step < config.steps:
                r = evaluate_arrays(model, *ev)
                emit(f"step={step} eval_epe={r.epe_mean:.6f} eval_fl_all={r.fl_all:.6f}")
                eval_steps.append(step)
                eval_epe.append(r.epe_mean)
        report = evaluate_arrays(model, *ev) if len(ev[0]) else None
        if report is not None:
            emit(f"step={config.steps} final_epe={report.epe_mean:.6f} final_fl_all={report.fl_all:.6f}")
            for i, e in enumerate(report.per_iteration_epe or [], start=1):
                emit(f"final_epe_iter{i}={e:.6f}")
            eval_steps.append(config.steps)
            eval_epe.append(report.epe_mean)

    if write_outputs:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "run_config.txt").write_text(config.to_text())
        (run_dir / "metrics.log").write_text("\n".join(lines) + "\n")
        save_checkpoint(run_dir / "model.frck", model, {"run": dataclasses.asdict(config)})
        if report is not None:
            (run_dir / "report.txt").write_text("\n".join(report.to_lines()) + "\n")
            (run_dir / "summary.json").write_text(report.to_json() + "\n")
        if curve_steps:
            training_curve(curve_steps, curve_loss, run_dir / "training_curve.png", eval_steps, eval_epe)
    return {"model": model, "report": report, "log_lines": lines, "run_dir": run_dir}


def summary_dict(report: EvalReport) -> dict:
    return json.loads(report.to_json())
