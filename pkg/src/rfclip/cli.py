"""Command-line entry point: ``rfclip {segment,evaluate,analyze,sweep,make-fixture}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import (BUDGET_TARGETS, FINAL_ATTENTIONS, SIMILARITY_SOURCES, THRESHOLD_RULES, ModelConfig,
                     RunConfig)
from .errors import ConfigError, RFClipError

log = logging.getLogger("rfclip")

OUTPUT_ENV = "RFCLIP_OUTPUT_DIR"


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--config", type=Path, help="run config JSON")
    g.add_argument("--variant", choices=("B16", "L14"), help="built-in model configuration")
    g.add_argument("--tau", help="distractor threshold, e.g. 0.0065 or 5/d")
    g.add_argument("--beta", type=float)
    g.add_argument("--layers-range", help="redistribution layers, e.g. 6 or 1-12")
    g.add_argument("--stride", type=int)
    g.add_argument("--short-side", type=int)
    g.add_argument("--mode", help="refocus | kk_proxy_baseline | plain_clip | suppression:<strategy>")
    g.add_argument("--threshold-rule", choices=THRESHOLD_RULES)
    g.add_argument("--similarity-source", choices=SIMILARITY_SOURCES)
    g.add_argument("--final-attention", choices=FINAL_ATTENTIONS)
    g.add_argument("--budget-target", choices=BUDGET_TARGETS)
    g.add_argument("--no-attention-redistribution", action="store_true")
    g.add_argument("--no-embedding-redistribution", action="store_true")
    g.add_argument("--receptive-field", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--output-dir", help=f"output directory (env {OUTPUT_ENV} also works)")
    g.add_argument("--debug", action="store_true", help="check attention contracts after every hook")


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    from .pipeline import parse_layer_range, parse_tau

    if args.config is not None:
        run = RunConfig.load(args.config)
    elif args.variant is not None:
        run = RunConfig(model=ModelConfig.b16() if args.variant == "B16" else ModelConfig.l14())
    else:
        raise ConfigError("give --config or --variant")
    changes = {}
    if args.tau is not None:
        changes["tau"] = parse_tau(args.tau, run.model.width)
    if args.layers_range is not None:
        changes["redistribution_layers"] = parse_layer_range(args.layers_range)
    for name in ("beta", "stride", "short_side", "mode", "threshold_rule", "similarity_source",
                 "final_attention", "budget_target", "receptive_field", "workers"):
        if getattr(args, name) is not None:
            changes[name] = getattr(args, name)
    if args.no_attention_redistribution:
        changes["attention_redistribution"] = False
    if args.no_embedding_redistribution:
        changes["embedding_redistribution"] = False
    if args.debug:
        changes["debug"] = True
    out = args.output_dir or os.environ.get(OUTPUT_ENV)
    if out:
        changes["output_dir"] = out
    try:
        return run.replace(**changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _load_model(args, run):
    from .model_io import load_checkpoint

    return load_checkpoint(args.checkpoint, run.model)


def cmd_segment(args) -> int:
    from .model_io import load_class_embeddings, load_image, write_segmentation
    from .pipeline import segment_image

    run = resolve_run_config(args)
    ckpt = _load_model(args, run)
    classes = load_class_embeddings(args.classes, run.model.output_dim)
    seg = segment_image(load_image(args.image), ckpt, classes, run)
    out = Path(args.output) if args.output else Path(run.output_dir) / (Path(args.image).stem + ".png")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_segmentation(seg, out)
    print(out)
    return 0


def cmd_evaluate(args) -> int:
    from .model_io import load_class_embeddings, load_manifest
    from .pipeline import evaluate

    run = resolve_run_config(args)
    ckpt = _load_model(args, run)
    classes = load_class_embeddings(args.classes, run.model.output_dim)
    report = evaluate(load_manifest(args.manifest), ckpt, classes, run, args.limit)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    miou = "n/a (no labelled pixels)" if report.miou is None else f"{100 * report.miou:.2f}"
    print(f"mIoU {miou} over {report.num_images} image(s); report at {out / 'report.json'}")
    return 0


def cmd_analyze(args) -> int:
    from .analysis import analyze
    from .model_io import load_image

    run = resolve_run_config(args)
    ckpt = _load_model(args, run)
    out = Path(run.output_dir) / "analysis" / Path(args.image).stem
    bundle = analyze(load_image(args.image), ckpt, run, args.query, out)
    print(f"wrote {len(bundle.files)} files to {out}")
    return 0


def cmd_sweep(args) -> int:
    from .model_io import load_class_embeddings, load_manifest
    from .pipeline import sweep

    run = resolve_run_config(args)
    ckpt = _load_model(args, run)
    classes = load_class_embeddings(args.classes, run.model.output_dim)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"sweep_{args.param}.csv"
    rows = sweep(args.param, args.values, load_manifest(args.manifest), ckpt, classes, run, args.limit, csv_path)
    for r in rows:
        print(f"{r['param']}={r['value']}: {r['miou']}")
    print(csv_path)
    return 0


def cmd_make_fixture(args) -> int:
    from .fixtures import make_fixture

    paths = make_fixture(args.out_dir, args.seed)
    print(json.dumps({k: str(v) for k, v in vars(paths).items() if not isinstance(v, tuple)}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfclip", description="Training-free attention refocusing for CLIP dense prediction")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="segment one image")
    p.add_argument("image", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--classes", type=Path, required=True)
    p.add_argument("--output", "-o", type=Path)
    _add_run_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="mIoU over a dataset manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--classes", type=Path, required=True)
    p.add_argument("--limit", type=int)
    _add_run_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="attention heatmaps, embedding-weight histogram, scatter, masks")
    p.add_argument("image", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--query", type=int, help="patch index whose attention row is plotted")
    _add_run_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="mIoU for each value of one parameter")
    p.add_argument("--param", required=True)
    p.add_argument("--values", nargs="+", help="defaults to the standard grid for the parameter")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--classes", type=Path, required=True)
    p.add_argument("--limit", type=int)
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-fixture", help="write the tiny random checkpoint and synthetic images")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RFClipError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
