"""``pepseg`` command line: print-config, synth, train, eval, infer, gradcheck.

Exit codes: 0 success, 1 validation error (bad flags, config, data or checkpoint),
2 runtime failure (non-finite training, failed gradient check, unexpected errors).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .artifacts import (dataset_hash, read_detections, save_overlay, write_detections,
                        write_manifest)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import DataError, SynthSpec, generate_dataset, load_dataset, load_image, save_dataset

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    """Flag combinations or inputs rejected before any work starts."""


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _with_overrides(cfg: RunConfig, args) -> RunConfig:
    train = cfg.train
    if getattr(args, "steps", None) is not None:
        train = dataclasses.replace(train, steps=args.steps)
    if getattr(args, "seed", None) is not None:
        train = dataclasses.replace(train, seed=args.seed)
    return dataclasses.replace(cfg, train=train)


def _scenes_for(cfg: RunConfig, data_dir: str | None):
    if data_dir:
        return load_dataset(data_dir)
    d = cfg.data
    spec = SynthSpec(d.image_size, (d.min_instances, d.max_instances), d.overlap_bias,
                     d.size_range, d.seed)
    return generate_dataset(d.num_images, spec)


def _check_classes(scenes, num_classes: int) -> None:
    seen = max((i.class_id for s in scenes for i in s.instances), default=0)
    if seen > num_classes:
        raise UsageError(f"class-count mismatch: dataset has class id {seen}, "
                         f"model predicts {num_classes} classes")


# --------------------------------------------------------------------------- commands

def cmd_print_config(args) -> int:
    print(load_config(args.config).dump(), end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    spec = SynthSpec(image_size=args.size, num_instances=(args.min_instances, args.max_instances),
                     overlap_bias=args.overlap, seed=args.seed)
    scenes = generate_dataset(args.n, spec)
    out = Path(args.out)
    save_dataset(scenes, out)
    write_manifest(out / "manifest.json", "synth", seed=args.seed, data_hash=dataset_hash(scenes),
                   synth=dataclasses.asdict(spec), n=args.n)
    print(f"wrote {len(scenes)} images ({sum(len(s.instances) for s in scenes)} instances) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train

    cfg = _with_overrides(load_config(args.config), args)
    scenes = _scenes_for(cfg, args.data)
    _check_classes(scenes, cfg.model.num_classes)
    out = Path(args.out)
    write_manifest(out / "run_manifest.json", "train", cfg, seed=cfg.train.seed,
                   data_hash=dataset_hash(scenes), data=args.data)
    result = train(cfg, scenes, out_dir=out)
    last = result.history[-1] if result.history else {}
    print(f"trained {result.steps} steps in {result.seconds:.1f}s; final loss {last.get('total', float('nan')):.4f}; "
          f"skipped images {result.skipped}")
    print(f"checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def _emit_report(report, path: str | None) -> None:
    print(report.to_text())
    if path:
        report.write(path)


def cmd_eval(args) -> int:
    from .evaluation import evaluate

    if args.ablation:
        return _eval_ablation(args)
    if not args.data:
        raise UsageError("eval needs --data")
    if bool(args.checkpoint) == bool(args.detections):
        raise UsageError("give exactly one of --checkpoint or --detections")
    scenes = load_dataset(args.data)
    if args.detections:
        cfg = load_config(args.config)
        dets = read_detections(args.detections)
        num_classes = max([cfg.model.num_classes] + [d.class_id for d in dets])
    else:
        from .inference import infer_scenes

        model, cfg = load_checkpoint(args.checkpoint)
        _check_classes(scenes, cfg.model.num_classes)
        dets = infer_scenes(model, scenes, cfg)
        num_classes = cfg.model.num_classes
    report = evaluate(dets, scenes, num_classes, cfg.eval.area_scaling, cfg.eval.max_dets)
    _emit_report(report, args.report)
    if args.out:
        write_manifest(Path(args.out) / "eval_manifest.json", "eval", cfg,
                       data_hash=dataset_hash(scenes), data=args.data,
                       checkpoint=args.checkpoint, detections=args.detections,
                       report=report.as_dict())
    return EXIT_OK


def _eval_ablation(args) -> int:
    from .ablation import format_table, run_ablation

    cfg = _with_overrides(load_config(args.config), args)
    scenes = _scenes_for(cfg, args.data)
    _check_classes(scenes, cfg.model.num_classes)
    out = Path(args.out) if args.out else None
    if out is not None:
        write_manifest(out / "run_manifest.json", "eval --ablation", cfg, seed=cfg.train.seed,
                       data_hash=dataset_hash(scenes), data=args.data)
    rows = run_ablation(cfg, scenes, log=lambda m: print(m, file=sys.stderr))
    table = format_table(rows)
    print(table)
    if out is not None:
        (out / "ablation.txt").write_text(table + "\n")
        for row in rows:
            slug = row.name.lower().replace(" + ", "_").replace(" ", "_")
            save_checkpoint(row.result.model, row.cfg, out / slug)
            row.report.write(out / f"{slug}_report.txt")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .inference import infer

    model, cfg = load_checkpoint(args.checkpoint)
    image = load_image(Path(args.image))
    if image.shape[1] % 32 or image.shape[2] % 32:
        raise UsageError(f"image size {image.shape[1]}x{image.shape[2]} is not a multiple of 32")
    dets = infer(model, image, cfg, image_id=Path(args.image).stem)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_detections(dets, out)
    if args.overlay:
        save_overlay(image, dets, args.overlay)
    print(f"{n} instances")
    for i, d in enumerate(dets):
        print(f"  [{i}] class={d.class_id} score={d.score:.3f} area={int(d.mask.sum())}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(seed=args.seed, tol=args.tol, coords=args.coords,
                           sabotage=args.sabotage)
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_RUNTIME


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pepseg", description="Desk-scale PEP instance segmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("print-config", help="dump the effective config as YAML")
    s.add_argument("--config")
    s.set_defaults(func=cmd_print_config)

    s = sub.add_parser("synth", help="write a synthetic shapes dataset")
    s.add_argument("--out", default="data/synth")
    s.add_argument("--n", type=int, default=32)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--overlap", type=float, default=0.7)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-instances", type=int, default=2)
    s.add_argument("--max-instances", type=int, default=5)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model and write checkpoints")
    s.add_argument("--config")
    s.add_argument("--data", help="dataset directory (default: synthesize from the data section)")
    s.add_argument("--out", default="runs/train")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="mask AP of a checkpoint or detections file")
    s.add_argument("--checkpoint")
    s.add_argument("--detections")
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--report", help="write key=value report here")
    s.add_argument("--out", help="directory for manifests (and ablation artifacts)")
    s.add_argument("--ablation", action="store_true",
                   help="train and evaluate Baseline, +excavating, +purifying and PEP")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="detect instances in one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", default="detections.jsonl")
    s.add_argument("--overlay", help="write a color overlay PNG here")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("gradcheck", help="finite-difference check of the five loss terms")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--coords", type=int, default=24)
    s.add_argument("--sabotage", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; that is a validation error in this contract
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, CheckpointError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
