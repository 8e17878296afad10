"""Command-line entry point: ``sammpa <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .backend import BackendClient, BackendError
from .core import DataError, SoftMask, load_image, load_mask, save_mask
from .embed import EmbeddingError
from .pipeline import (
    ConfigError,
    PipelineConfig,
    PipelineError,
    evaluate,
    make_synthetic_dataset,
    run,
)
from .pipeline.run import _embedder, _load_samples, run_selection
from .prompt import PromptSet, generate_prompts
from .register import (
    FieldFormatError,
    RegistrationConfig,
    propagate_mask,
    read_field,
    register,
    write_field,
)
from .segment import (
    ExternalSegmenter,
    MockSegmenter,
    SegmentationError,
    SegmentationRequest,
    refine,
)

log = logging.getLogger("sammpa")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON/YAML file mirroring PipelineConfig")
    p.add_argument("--output", type=Path, help="output directory or file")
    p.add_argument("--workers", type=int, help="parallel query workers")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def _load_config(args, require=True) -> PipelineConfig | None:
    if args.config is None:
        if require and getattr(args, "dataset", None) is None:
            raise ConfigError("--config or --dataset is required")
        if getattr(args, "dataset", None) is None:
            return None
        cfg = PipelineConfig(dataset_root=args.dataset)
    else:
        cfg = PipelineConfig.load(args.config)
    if getattr(args, "dataset", None) is not None:
        cfg.dataset_root = Path(args.dataset)
    if getattr(args, "k", None) is not None:
        cfg.K = args.k
    if args.output is not None:
        cfg.output_dir = args.output
    if args.workers is not None:
        cfg.workers = args.workers
    return cfg


def _reg_config(args) -> RegistrationConfig:
    if args.config is not None:
        return PipelineConfig.load(args.config).registration
    return RegistrationConfig()


def cmd_run(args):
    cfg = _load_config(args)
    report = run(cfg)
    a = report.aggregates
    print(json.dumps({k: a[k] for k in ("n_queries", "n_failed", "n_fallback",
                                        "coarse_dice_mean", "final_dice_mean")}, indent=2))
    print(f"report written to {cfg.output_dir / 'report.json'}")


def cmd_select(args):
    cfg = _load_config(args)
    if args.no_es:
        cfg.toggles = type(cfg.toggles)(ES=False, MP=True, PA=cfg.toggles.PA, PR=cfg.toggles.PR)
    cfg.validate()
    samples = _load_samples(cfg)
    cfg.validate(len(samples))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    embedder, _ = _embedder(cfg, cfg.output_dir)
    try:
        sel = run_selection(cfg, samples, embedder)
    finally:
        client = getattr(embedder, "client", None)
        if client is not None:
            client.close()
    out = cfg.output_dir / "selection.json"
    out.write_text(sel.to_json([s.id for s in samples]))
    print(f"support: {', '.join(sel.support_ids)}  objective={sel.objective:.6g}")
    print(f"written to {out}")


def cmd_register(args):
    moving = load_image(args.moving, args.size)
    fixed = load_image(args.fixed, args.size)
    if moving.channels != 1:
        moving = type(moving)(moving.gray().astype("float32"))
    if fixed.channels != 1:
        fixed = type(fixed)(fixed.gray().astype("float32"))
    field = register(moving, fixed, _reg_config(args))
    out = args.output or Path("field.mpad")
    write_field(field, out)
    print(f"mean |u| = {field.mean_magnitude():.4f} px; written to {out}")


def cmd_propagate(args):
    mask = load_mask(args.mask, args.size)
    field = read_field(args.field)
    soft = propagate_mask(mask, field)
    out = args.output or Path("coarse.png")
    save_mask(soft.threshold(0.5), out)
    print(f"coarse mask area {soft.threshold(0.5).area}; written to {out}")


def cmd_prompt(args):
    mask = load_mask(args.coarse, args.size)
    prompts = generate_prompts(SoftMask.from_binary(mask), args.margin, args.soften_scale)
    out = args.output or Path("prompts.json")
    prompts.save(out)
    print(f"fallback={prompts.fallback_flag} box={prompts.box.as_list()}; written to {out}")


def cmd_segment(args):
    image = load_image(args.image, args.size)
    prompts = PromptSet.load(args.prompts)
    out = args.output or Path("prediction.png")
    if args.backend == "mock":
        backend = MockSegmenter(args.tol)
    else:
        backend = ExternalSegmenter(BackendClient.from_address(args.backend),
                                    out.parent / "work")
    try:
        req = SegmentationRequest(args.id, image, prompts)
        res = backend.segment(req)
        res = refine(backend, image, prompts, res, args.rounds, sample_id=args.id)
    finally:
        backend.close()
    save_mask(res.mask, out)
    print(f"confidence={res.confidence:.4f} round={res.round}; written to {out}")


def cmd_evaluate(args):
    table = evaluate(args.pred, args.gt, args.size)
    if args.output:
        args.output.write_text(table.to_json())
        args.output.with_suffix(".csv").write_text(table.to_csv())
    print(f"n={len(table.rows)} mean={table.mean:.4f} std={table.std:.4f} missing={table.n_missing}")


def cmd_synth(args):
    out = args.output or Path("synthetic")
    make_synthetic_dataset(args.n, args.seed, out)
    print(f"{args.n} samples written to {out}")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="sammpa", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"sammpa {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="full pipeline")
    p.add_argument("--dataset", type=Path)
    p.add_argument("-k", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("select", parents=[common], help="support-set selection only")
    p.add_argument("--dataset", type=Path)
    p.add_argument("-k", type=int)
    p.add_argument("--no-es", action="store_true", help="first K ids instead of clustering")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("register", parents=[common], help="register one image pair")
    p.add_argument("--moving", type=Path, required=True, help="support image")
    p.add_argument("--fixed", type=Path, required=True, help="query image")
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("propagate", parents=[common], help="warp a mask through a field")
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--field", type=Path, required=True)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("prompt", parents=[common], help="prompts from a coarse mask")
    p.add_argument("--coarse", type=Path, required=True)
    p.add_argument("--margin", type=int, default=0)
    p.add_argument("--soften-scale", type=float, default=0.5)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("segment", parents=[common], help="segment one image from saved prompts")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--prompts", type=Path, required=True)
    p.add_argument("--backend", default="mock", help="'mock' or a backend address")
    p.add_argument("--rounds", type=int, default=1, help="post-refinement rounds")
    p.add_argument("--tol", type=float, default=0.1, help="mock region-grow tolerance")
    p.add_argument("--id", default="query")
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", parents=[common], help="Dice of predictions vs ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--size", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic blob dataset")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, DataError, BackendError, EmbeddingError, SegmentationError,
            FieldFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
