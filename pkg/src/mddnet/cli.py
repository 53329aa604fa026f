"""Command-line entry point: ``mddnet <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config, profile
from .data import IMAGE_SUFFIXES, ToySpec, toy_dataset

log = logging.getLogger("mddnet")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else profile("toy")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.model.seed = args.seed
    if getattr(args, "data", None):
        cfg.data.root = args.data
    return cfg


def _images(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"no such image or directory: {p}")
    if not out:
        raise FileNotFoundError("no input images found")
    return out


def cmd_train(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    result = pipeline.train(cfg, out, resume=args.resume, progress=log.info)
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss log: {result.loss_log} ({result.steps} steps)")


def _checkpoint_config(args) -> RunConfig | None:
    # Without --config the checkpoint's own config is authoritative.
    return _config(args) if args.config else None


def cmd_infer(args) -> None:
    cfg = _checkpoint_config(args)
    results = pipeline.run_infer(cfg, args.checkpoint, _images(args.inputs), args.out,
                                 alpha=args.alpha, raw=args.raw)
    for r in results:
        print(json.dumps({"image": r["image"], "s": r["s"], "alpha": r["alpha"]}))


def cmd_eval(args) -> None:
    cfg = _checkpoint_config(args)
    if cfg is None:
        cfg = pipeline.load_checkpoint(args.checkpoint).config
    if args.data:
        cfg.data.root = args.data
    if not cfg.data.root:
        raise ValueError("no dataset root: pass --data or set data.root in the config")
    report = pipeline.run_eval(cfg, args.checkpoint, args.out, alpha=args.alpha)
    avg = report.average()
    print(f"metrics: {Path(args.out) / 'metrics.csv'}")
    print(json.dumps(avg, indent=2))


def cmd_sweep(args) -> None:
    cfg = _config(args)
    rows = pipeline.sweep_memory(cfg, args.sizes, args.out, progress=log.info)
    for r in rows:
        print(f"N={r['N']:<5d} image_mAUROC={r['image_mAUROC']:.4f} pixel_mAUPRO={r['pixel_mAUPRO']:.4f}")


def cmd_preview(args) -> None:
    cfg = _config(args)
    written = pipeline.synth_preview(cfg, args.n, args.out)
    print(f"wrote {len(written)} triptychs to {args.out}")


def cmd_toy(args) -> None:
    spec = ToySpec.from_file(args.spec) if args.spec else ToySpec()
    if args.seed is not None:
        spec.seed = args.seed
    index = toy_dataset(spec, args.out)
    print(f"{args.out}: {len(index.categories)} categories, {len(index.train)} train, {len(index.test)} test")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mddnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default: str):
        p.add_argument("--config", help="JSON run config (defaults to the toy profile)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=out_default)
        return p

    p = common(sub.add_parser("train", help="train a model"), "runs/train")
    p.add_argument("--data", help="dataset root overriding data.root")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("infer", help="score images and write heatmaps"), "runs/infer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--raw", action="store_true", help="also write raw float32 maps")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.set_defaults(func=cmd_infer)

    p = common(sub.add_parser("eval", help="evaluate on a test split"), "runs/eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("sweep-memory", help="train and evaluate per memory size"), "runs/sweep")
    p.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 256])
    p.add_argument("--data")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("synth-preview", help="write synthetic anomaly triptychs"), "runs/preview")
    p.add_argument("-n", type=int, default=8)
    p.add_argument("--data")
    p.set_defaults(func=cmd_preview)

    p = sub.add_parser("make-toy-dataset", help="write the procedural two-category dataset")
    p.add_argument("--spec", help="JSON toy dataset spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="data/toy")
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, KeyError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
