"""Command-line entry point: ``flowrefine {train,eval,infer,viz,ablate}``.

Exit codes: 0 success, 2 usage or configuration error (including missing
input files), 3 numeric failure, 4 file format or other IO error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import ingest_dataset
from .errors import (
    ConfigError,
    FlowFormatError,
    LayoutError,
    NonFiniteError,
    NoValidPixelsError,
    ShapeError,
)
from .flow_io import flow_to_color, read_flow, read_image, write_flo, write_image
from .flow_ops import FlowField
from .losses import confidence_map
from .metrics import epe, error_map, evaluate, merge_reports
from .model import IterationTrace, image_to_tensor
from .render import ablation_chart, analysis_figure, confidence_render, error_render, iteration_panels
from .tensor import Tensor, default_dtype, no_grad
from .train import OUTPUT_ENV, DivergenceError, RunConfig, evaluate_arrays, load_arrays, load_run_config, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# CLI flag -> RunConfig key for train/ablate
_TRAIN_FLAGS = {
    "variant": "variant",
    "steps": "steps",
    "seed": "seed",
    "lr": "lr",
    "batch_size": "batch_size",
    "loss_variant": "loss_variant",
    "alpha": "alpha",
    "beta": "beta",
    "confidence_source": "confidence_source",
    "iterations": "iterations",
    "dataset": "dataset",
    "layout": "layout",
    "output_dir": "output_dir",
    "lr_schedule": "lr_schedule",
}


def _output_dir(arg, fallback: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUTPUT_ENV) or fallback)


def _out(line: str) -> None:
    print(line, flush=True)


def _collect_overrides(args) -> dict:
    over = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    for flag, key in _TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            over[key] = str(val)
    if getattr(args, "float64", False):
        over["float64"] = "true"
    return over


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def cmd_train(args) -> int:
    config = load_run_config(args.config, _collect_overrides(args))
    log = _out if args.verbose else (lambda line: _out(line) if "eval" in line or "final" in line or "params" in line else None)
    result = train(config, log=log)
    _out(f"run_dir={result['run_dir']}")
    return EXIT_OK


def _sample_report(model, sample, relative):
    dtype = model.dtype
    with no_grad(), default_dtype(dtype):
        trace = model.estimate_flow(image_to_tensor(sample.image1, dtype), image_to_tensor(sample.image2, dtype))
    gt = FlowField(Tensor(sample.flow_gt.flow.data, dtype=np.float64), sample.flow_gt.valid)
    flows = [FlowField(Tensor(f.flow.data, dtype=np.float64)) for f in trace.flows]
    return evaluate(flows[-1], gt, IterationTrace(flows), relative=relative), flows[-1], gt


def cmd_eval(args) -> int:
    relative = not args.three_px_only
    out_dir = _output_dir(args.output_dir, "") if (args.output_dir or os.environ.get(OUTPUT_ENV)) else None
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise ConfigError("--pred and --gt must be given together")
        pred = read_flow(_require_file(args.pred, "prediction"))
        gt = read_flow(_require_file(args.gt, "ground truth"))
        pred = FlowField(Tensor(pred.flow.data, dtype=np.float64), pred.valid)
        gt = FlowField(Tensor(gt.flow.data, dtype=np.float64), gt.valid)
        report = evaluate(pred, gt, relative=relative)
        first = (pred, gt)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (with optional --dataset) or --pred and --gt")
        model, meta = load_checkpoint(_require_file(args.checkpoint, "checkpoint"), dtype=np.float64 if args.float64 else None)
        if args.dataset:
            index = [d for d in ingest_dataset(args.dataset, args.layout) if d.has_ground_truth]
            if not index:
                raise ConfigError(f"dataset {args.dataset} has no samples with ground truth")
            reports, first = [], None
            for d in index:
                r, pred, gt = _sample_report(model, d.load(), relative)
                reports.append(r)
                first = first or (pred, gt)
            report = merge_reports(reports)
        else:
            run = meta.get("run", {})
            config = RunConfig(**run) if run else RunConfig(variant="sci" if model.config.sci_enabled else "baseline")
            img1, img2, flow, valid = load_arrays(config, held_out=True)
            report = evaluate_arrays(model, img1, img2, flow, valid, relative=relative)
            first = None
    for line in report.to_lines():
        _out(line)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text("\n".join(report.to_lines()) + "\n")
        (out_dir / "summary.json").write_text(report.to_json() + "\n")
        if first is not None:
            pred, gt = first
            pred1 = FlowField(Tensor(pred.flow.data[:1]))
            gt1 = FlowField(Tensor(gt.flow.data[:1]), None if gt.valid is None else gt.valid[:1])
            analysis_figure(pred1, gt1, error_map(pred1, gt1)[0, 0], confidence_map(gt1, pred1), out_dir / "analysis.png")
    return EXIT_OK


def _pad_to(img: np.ndarray, multiple: int):
    h, w = img.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return img, (h, w)


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"), dtype=np.float64 if args.float64 else None)
    img1 = read_image(_require_file(args.image1, "image"))
    img2 = read_image(_require_file(args.image2, "image"))
    if img1.shape != img2.shape:
        raise ShapeError(f"images differ in size: {img1.shape} vs {img2.shape}")
    s = model.config.downsample_factor
    p1, (h, w) = _pad_to(img1, s)
    p2, _ = _pad_to(img2, s)
    dtype = model.dtype
    with no_grad(), default_dtype(dtype):
        trace = model.estimate_flow(image_to_tensor(p1, dtype), image_to_tensor(p2, dtype), iterations=args.iterations)
    flows = [f.flow.data[0, :, :h, :w].transpose(1, 2, 0).astype(np.float32) for f in trace.flows]
    out_dir = _output_dir(args.output_dir, ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = args.name
    flo_path = out_dir / f"{stem}.flo"
    write_flo(flo_path, flows[-1])
    scale = max(float(np.hypot(f[..., 0], f[..., 1]).max()) for f in flows) or 1.0
    write_image(out_dir / f"{stem}.png", flow_to_color(flows[-1], scale))
    _out(f"flow={flo_path}")
    _out(f"color={out_dir / (stem + '.png')}")
    if args.dump_iterations:
        for i, f in enumerate(flows, start=1):
            write_image(out_dir / f"{stem}_iter{i:02d}.png", flow_to_color(f, scale))
        iteration_panels(flows, out_dir / f"{stem}_iterations.png", scale)
        _out(f"iterations={len(flows)}")
    return EXIT_OK


def cmd_viz(args) -> int:
    flow = read_flow(_require_file(args.flow, "flow file"))
    out_dir = _output_dir(args.output_dir, ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.flow).stem
    color = out_dir / f"{stem}_color.png"
    write_image(color, flow_to_color(flow, args.max_magnitude))
    _out(f"color={color}")
    if args.gt:
        gt = read_flow(_require_file(args.gt, "ground truth"))
        pred = FlowField(Tensor(flow.flow.data, dtype=np.float64), flow.valid)
        gt = FlowField(Tensor(gt.flow.data, dtype=np.float64), gt.valid)
        err = error_map(pred, gt)
        conf = confidence_map(gt, pred)
        write_image(out_dir / f"{stem}_error.png", error_render(err))
        write_image(out_dir / f"{stem}_confidence.png", confidence_render(conf))
        analysis_figure(pred, gt, err, conf, out_dir / f"{stem}_analysis.png")
        _out(f"epe={epe(pred, gt):.6f}")
        _out(f"error={out_dir / (stem + '_error.png')}")
        _out(f"confidence={out_dir / (stem + '_confidence.png')}")
    return EXIT_OK


ABLATION_GRID = (
    # (label, loss_variant, confidence_source)
    ("a: L1", "a", "final_iteration"),
    ("b: a(1-M)^b", "b", "final_iteration"),
    ("c: 1+aM^b", "c", "final_iteration"),
    ("d: 1+a(1-M)^b", "d", "final_iteration"),
    ("d, per-iteration M", "d", "per_iteration"),
)


def cmd_ablate(args) -> int:
    base = load_run_config(args.config, _collect_overrides(args)).replace(variant="sci_rfl")
    out_dir = Path(base.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, variant, source in ABLATION_GRID:
        tag = f"{variant}_{source}"
        cfg = base.replace(loss_variant=variant, confidence_source=source, output_dir=str(out_dir / tag))
        result = train(cfg)
        r = result["report"]
        rows.append((label, tag, r.epe_mean, r.fl_all))
        _out(f"config={tag} epe={r.epe_mean:.6f} fl_all={r.fl_all:.6f}")
    table = ["label\tconfig\tepe\tfl_all"] + [f"{a}\t{b}\t{c:.6f}\t{d:.6f}" for a, b, c, d in rows]
    (out_dir / "ablation.tsv").write_text("\n".join(table) + "\n")
    (out_dir / "ablation.json").write_text(
        json.dumps([{"label": a, "config": b, "epe": c, "fl_all": d} for a, b, c, d in rows], indent=2) + "\n"
    )
    ablation_chart([r[0] for r in rows], [r[2] for r in rows], out_dir / "ablation.png")
    _out(f"table={out_dir / 'ablation.tsv'}")
    return EXIT_OK


def _add_train_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--variant", choices=("baseline", "sci", "sci_rfl"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=("constant", "linear"))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--loss-variant", dest="loss_variant", choices=("a", "b", "c", "d"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--confidence-source", dest="confidence_source", choices=("final_iteration", "per_iteration", "none"))
    p.add_argument("--dataset", help="train on an ingested dataset instead of synthetic pairs")
    p.add_argument("--layout", choices=("sintel_like", "kitti_like", "flo_pairs"))
    p.add_argument("--output-dir", dest="output_dir", help=f"run directory (default: ${OUTPUT_ENV} or config)")
    p.add_argument("--float64", action="store_true", help="run in 64-bit floating point")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowrefine", description="Iterative optical-flow refinement toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a run directory")
    _add_train_flags(p)
    p.add_argument("-v", "--verbose", action="store_true", help="print every step's log line")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, or a predicted flow file against ground truth")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="dataset root (default: the checkpoint's held-out synthetic set)")
    p.add_argument("--layout", default="flo_pairs", choices=("sintel_like", "kitti_like", "flo_pairs"))
    p.add_argument("--pred", help="predicted flow file (.flo or KITTI .png)")
    p.add_argument("--gt", help="ground-truth flow file")
    p.add_argument("--three-px-only", action="store_true", help="count outliers by the 3 px rule alone")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--float64", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="estimate flow for one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image1", required=True)
    p.add_argument("--image2", required=True)
    p.add_argument("--iterations", type=int, help="refinement iterations (default: the model's)")
    p.add_argument("--dump-iterations", action="store_true", help="also write one color PNG per iteration")
    p.add_argument("--name", default="flow", help="output file stem")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--float64", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("viz", help="render a flow file, plus error and confidence maps when --gt is given")
    p.add_argument("flow")
    p.add_argument("--gt")
    p.add_argument("--max-magnitude", dest="max_magnitude", type=float)
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablate", help="train the loss-variant and confidence-source grid and tabulate EPE")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, NotADirectoryError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteError, NoValidPixelsError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FlowFormatError, LayoutError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
