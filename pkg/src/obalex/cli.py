"""``obalex`` command-line interface.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import (
    EVALUATE_SCHEMA,
    SYNTH_SCHEMA,
    TRAIN_DEMO_SCHEMA,
    ConfigError,
    load_config,
)
from .errors import EmptyExplanation, IoError, ObalexError, ShapeMismatch, UnsupportedFormat
from .explainers import METHODS, ExplainerConfig, explain
from .image_io import (
    ActivationMap,
    ensure_dir,
    load_heatmap,
    load_image,
    load_mask,
    read_dataset,
    read_labels,
    render_overlay,
    resample_bilinear,
    save_heatmap,
    save_overlay,
    validate_dataset_dir,
)
from .metric import normalize_explanation, score

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad input from the caller; exits with code 2."""


def _print_json(data) -> None:
    print(json.dumps(data, sort_keys=True))


def cmd_score(args) -> int:
    try:
        mask = load_mask(args.mask)
        raw, _ = load_heatmap(args.heatmap)
    except (IoError, UnsupportedFormat) as exc:
        raise UsageError(str(exc)) from None
    if raw.shape != mask.shape:
        if not args.resample:
            raise UsageError(f"shape mismatch: mask {mask.shape} vs heatmap {raw.shape} (use --resample)")
        raw = resample_bilinear(raw, *mask.shape)
    try:
        s = score(mask, normalize_explanation(raw))
    except (ShapeMismatch, EmptyExplanation) as exc:
        raise UsageError(str(exc)) from None
    result = {"score": s, "mask": str(args.mask), "heatmap": str(args.heatmap)}
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True) + "\n")
    _print_json(result)
    return EXIT_OK


def cmd_explain(args) -> int:
    from .tinynet import load_model

    try:
        net = load_model(args.model)
        image = load_image(args.image)
        mask = load_mask(args.mask) if args.mask else None
        config = ExplainerConfig(
            method=args.method, patch=args.patch, stride=args.stride, fill=args.fill,
            target_layer=args.layer, grid=args.grid, samples=args.samples, ridge=args.ridge,
            seed=args.seed,
        )
    except (IoError, UnsupportedFormat, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if not 0 <= args.class_ < net.num_classes:
        raise UsageError(f"--class {args.class_} outside [0, {net.num_classes})")
    try:
        expl = explain(net, image, args.class_, config)
    except EmptyExplanation as exc:
        raise UsageError(f"{args.method}: the explainer found no positive evidence for class {args.class_} ({exc})") from None
    except ShapeMismatch as exc:
        raise UsageError(str(exc)) from None
    out = ensure_dir(args.out_dir)
    stem = Path(args.image).stem
    heatmap = out / f"{stem}_{args.method}.png"
    sidecar = save_heatmap(heatmap, expl.values, stem)
    s = score(mask, expl) if mask is not None else None
    overlay_mask = mask if mask is not None else ActivationMap(expl.values * 0.0)
    overlay = out / f"{stem}_{args.method}_overlay.png"
    save_overlay(overlay, render_overlay(image, expl, overlay_mask, s))
    _print_json({"heatmap": str(heatmap), "sidecar": str(sidecar), "overlay": str(overlay), "score": s})
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .synth import SynthSpec, export, generate

    data = load_config(args.config, SYNTH_SCHEMA) if args.config else {}
    try:
        spec = SynthSpec.from_dict(data)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    root = export(generate(spec), args.out)
    problems = validate_dataset_dir(root)
    if problems:
        print("\n".join(problems), file=sys.stderr)
        return EXIT_RUNTIME
    (Path(root) / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    _print_json({"dataset": str(root), "samples": spec.samples_per_class * spec.num_classes})
    return EXIT_OK


def _experiment_config(data: dict):
    from .harness import ExperimentConfig

    try:
        return ExperimentConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train_demo(args) -> int:
    from .harness import train_demo

    data = load_config(args.config, TRAIN_DEMO_SCHEMA) if args.config else {}
    strategies = data.pop("strategies", ["a", "b"])
    masked = data.pop("masked_background", True)
    config = _experiment_config(data)
    train_demo(config, strategies, masked, out_dir=args.out)
    _print_json({"report": str(Path(args.out) / "report.json"), "csv": str(Path(args.out) / "report.csv")})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .harness import csv_text, dump_json, report_dict, write_explanations
    from .tinynet import load_model

    data = load_config(args.config, EVALUATE_SCHEMA)
    try:
        explainers = [ExplainerConfig.from_dict(e) for e in data["explainers"]]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    base = Path(args.config).parent

    def resolve(key):
        return None if key not in data else base / data[key]

    problems = validate_dataset_dir(resolve("dataset"))
    if problems:
        raise UsageError("; ".join(problems))
    samples = read_dataset(resolve("dataset"))
    net = load_model(resolve("model")) if "model" in data else None
    predictions = dict(read_labels(resolve("predictions"))) if "predictions" in data and net is None else None
    from .harness import evaluate_dataset

    report, explanations, eval_set = evaluate_dataset(
        samples, explainers, net=net, predictions=predictions, heatmaps_dir=resolve("heatmaps"),
        eval_sample_cap=data.get("eval_sample_cap", 50), seed=data.get("seed", 0),
        min_correct=data.get("min_correct", 5),
    )
    out = ensure_dir(args.out)
    side = samples[0].image.height
    dump_json(report_dict([report], data, explainers, side), out / "report.json")
    (out / "report.csv").write_text(csv_text([report], [e.name for e in explainers]))
    write_explanations(explanations, {s.image_id: s for s in eval_set}, out)
    _print_json({"report": str(out / "report.json"), "csv": str(out / "report.csv")})
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render

    try:
        text, plots = render(args.input, args.out)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.input}: malformed JSON ({exc})") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{args.input}: not a report file ({exc})") from None
    except OSError as exc:
        raise UsageError(f"{args.input}: {exc.strerror or exc}") from None
    print(text)
    for p in plots:
        print(f"plot: {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="obalex", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"obalex {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score a heatmap against an object mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--heatmap", required=True)
    p.add_argument("--out", help="also write the JSON result here")
    p.add_argument("--resample", action="store_true", help="resample the heatmap to the mask size")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("explain", help="explain one image with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--class", dest="class_", type=int, required=True)
    p.add_argument("--mask", help="object mask for the overlay contour and score")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--patch", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--fill", type=float, default=0.5)
    p.add_argument("--layer", type=int, help="target conv layer index (Grad-CAM methods)")
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--ridge", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--config", help="JSON synth spec (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-demo", help="run the strategy and masked-background experiments")
    p.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("evaluate", help="one evaluation pass over a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render report.json as a table and plots")
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="directory for plots (default: next to the report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # unknown flags exit with code 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"obalex {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ObalexError, OSError, ValueError) as exc:
        print(f"obalex {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
