"""Command line surface: explain single images, evaluate batches, and run
the verification suites.

All outputs are byte-deterministic for fixed inputs and seeds: reports carry
no timestamps, and every random draw is derived from explicit seed flags.
The CRG_THREADS environment variable caps per-image parallelism in
`evaluate` (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .cam import CAM_METHODS, CamMethod, explain
from .imgio import Image, read_image, write_image
from .metrics import evaluate_batch
from .postprocess import OverlayStyle, apply_colormap, normalize_minmax, overlay, upsample_bilinear
from .suites import hvp_suite, shapley_suite, theorem_suite
from .utility import UTILITY_KINDS, UtilitySpec
from .zoo import ARCHS, build_model


def _report_text(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _emit_report(report: dict, path) -> None:
    text = _report_text(report)
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _thread_count(parser: argparse.ArgumentParser) -> int:
    raw = os.environ.get("CRG_THREADS")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        parser.error(f"CRG_THREADS must be an integer, got {raw!r}")
    if value < 1:
        parser.error(f"CRG_THREADS must be >= 1, got {value}")
    return value


def _resolve_method(parser: argparse.ArgumentParser, args):
    if args.method == "randomcam":
        if args.method_seed is None:
            parser.error("randomcam needs --method-seed")
        return CamMethod("randomcam", seed=args.method_seed)
    return CamMethod(args.method)


def _cmd_explain(parser: argparse.ArgumentParser, args) -> int:
    image = read_image(args.image)
    model = build_model(args.arch, num_classes=args.classes, seed=args.seed,
                        in_shape=image.pixels.shape)
    logits = model.forward(image.pixels)
    target = int(np.argmax(logits)) if args.target_class is None else args.target_class
    spec = UtilitySpec(target, args.utility)
    method = _resolve_method(parser, args)

    heatmap = explain(model, image.pixels, spec, method, tap=args.tap)
    grid = normalize_minmax(heatmap.grid("post"))
    upsampled = upsample_bilinear(grid, image.height, image.width)

    stem = Path(args.image).stem
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.image).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    heat_path = out_dir / f"{stem}.{method.name}.heatmap.ppm"
    over_path = out_dir / f"{stem}.{method.name}.overlay.ppm"
    json_path = out_dir / f"{stem}.{method.name}.json"

    write_image(heat_path, Image(apply_colormap(upsampled)))
    write_image(over_path, Image(overlay(image.pixels, upsampled,
                                         OverlayStyle(alpha=args.alpha))))
    sidecar = {
        "image": Path(args.image).name,
        "arch": model.arch,
        "classes": model.num_classes,
        "model_seed": args.seed,
        "method": method.name,
        "method_seed": args.method_seed,
        "utility": heatmap.utility,
        "target_class": heatmap.target_class,
        "tap": heatmap.layer,
        "spatial": list(heatmap.spatial),
        "alpha": args.alpha,
        "pre_relu": [float(v) for v in heatmap.pre_relu],
        "outputs": {"heatmap": heat_path.name, "overlay": over_path.name},
    }
    json_path.write_text(_report_text(sidecar))
    sys.stderr.write(f"wrote {heat_path} {over_path} {json_path}\n")
    return 0


def _cmd_evaluate(parser: argparse.ArgumentParser, args) -> int:
    image_dir = Path(args.images)
    paths = sorted(p for p in image_dir.glob("*")
                   if p.suffix.lower() in (".ppm", ".pgm"))
    if args.limit is not None:
        paths = paths[:args.limit]
    if not paths:
        sys.stderr.write(f"no images found in {image_dir}\n")
        return 1
    images = [read_image(p) for p in paths]

    model = build_model(args.arch, num_classes=args.classes, seed=args.seed,
                        in_shape=images[0].pixels.shape)
    spec = UtilitySpec(args.target_class, args.utility)
    method = _resolve_method(parser, args)
    record = evaluate_batch(model, images, spec, method,
                            threads=_thread_count(parser))

    report = record.to_report()
    _emit_report(report, args.report)
    if args.csv is not None:
        keys = ("method", "utility", "arch", "n_images",
                "ad", "coherency", "complexity", "adcc", "ic", "add")
        row = [str(report[k]) if k in ("method", "utility", "arch", "n_images")
               else f"{report[k]:.4f}" for k in keys]
        Path(args.csv).write_text(",".join(keys) + "\n" + ",".join(row) + "\n")
    if record.n_failed:
        sys.stderr.write(f"skipped {record.n_failed} images that failed forward\n")
    return 0


def _run_suite(report: dict, path) -> int:
    _emit_report(report, path)
    status = "PASS" if report["pass"] else "FAIL"
    sys.stderr.write(f"{report['suite']}: {status}\n")
    return 0 if report["pass"] else 1


def _cmd_shapley_verify(parser: argparse.ArgumentParser, args) -> int:
    report = shapley_suite(seed=args.seed, mc_seeds=args.mc_seeds,
                           mc_samples=args.mc_samples)
    return _run_suite(report, args.report)


def _cmd_hvp_check(parser: argparse.ArgumentParser, args) -> int:
    return _run_suite(hvp_suite(seed=args.seed, graphs=args.graphs), args.report)


def _cmd_theorem_check(parser: argparse.ArgumentParser, args) -> int:
    return _run_suite(theorem_suite(seeds=args.seeds), args.report)


def _add_model_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--method", required=True, choices=CAM_METHODS)
    sub.add_argument("--utility", default="rest", choices=UTILITY_KINDS)
    sub.add_argument("--arch", default="cnn-smooth", choices=ARCHS)
    sub.add_argument("--classes", type=int, default=3,
                     help="number of output classes (default 3)")
    sub.add_argument("--seed", type=int, default=0,
                     help="model weight seed (default 0)")
    sub.add_argument("--method-seed", type=int, default=None,
                     help="map-coefficient seed, required for randomcam")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crgx",
        description="Gradient and Shapley heatmaps for small bundled models, "
                    "with metric evaluation and verification suites.")
    commands = parser.add_subparsers(dest="command", required=True)

    explain_cmd = commands.add_parser(
        "explain", help="write heatmap, overlay, and JSON sidecar for one image")
    explain_cmd.add_argument("--image", required=True, help="PPM/PGM input file")
    _add_model_flags(explain_cmd)
    explain_cmd.add_argument("--class", dest="target_class", type=int, default=None,
                             help="target class (default: predicted class)")
    explain_cmd.add_argument("--tap", default="auto",
                             help="tap layer name (default auto)")
    explain_cmd.add_argument("--alpha", type=float, default=0.35,
                             help="overlay blend weight (default 0.35)")
    explain_cmd.add_argument("--out-dir", default=None,
                             help="output directory (default: next to the image)")
    explain_cmd.set_defaults(handler=_cmd_explain)

    evaluate_cmd = commands.add_parser(
        "evaluate", help="run heatmap quality metrics over a directory of images")
    evaluate_cmd.add_argument("--images", required=True,
                              help="directory of PPM/PGM files")
    _add_model_flags(evaluate_cmd)
    evaluate_cmd.add_argument("--class", dest="target_class", type=int, default=0,
                              help="target class for every image (default 0)")
    evaluate_cmd.add_argument("--limit", type=int, default=None,
                              help="use only the first N images")
    evaluate_cmd.add_argument("--report", default=None,
                              help="write the JSON report here (default stdout)")
    evaluate_cmd.add_argument("--csv", default=None,
                              help="also write a one-row CSV summary")
    evaluate_cmd.set_defaults(handler=_cmd_evaluate)

    shapley_cmd = commands.add_parser(
        "shapley-verify", help="exact/approximate attribution checks")
    shapley_cmd.add_argument("--seed", type=int, default=2024)
    shapley_cmd.add_argument("--mc-seeds", type=int, default=10,
                             help="estimator seeds for the sampling check")
    shapley_cmd.add_argument("--mc-samples", type=int, default=50000,
                             help="permutations per estimator seed")
    shapley_cmd.add_argument("--report", default=None)
    shapley_cmd.set_defaults(handler=_cmd_shapley_verify)

    hvp_cmd = commands.add_parser(
        "hvp-check", help="curvature products against finite differences")
    hvp_cmd.add_argument("--seed", type=int, default=77)
    hvp_cmd.add_argument("--graphs", type=int, default=100)
    hvp_cmd.add_argument("--report", default=None)
    hvp_cmd.set_defaults(handler=_cmd_hvp_check)

    theorem_cmd = commands.add_parser(
        "theorem-check", help="ensemble, residual, probe, and collapse identities")
    theorem_cmd.add_argument("--seeds", type=int, default=5,
                             help="model seeds per configuration (default 5)")
    theorem_cmd.add_argument("--report", default=None)
    theorem_cmd.set_defaults(handler=_cmd_theorem_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(parser, args)
    except (ValueError, OSError) as err:
        sys.stderr.write(f"error: {err}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
