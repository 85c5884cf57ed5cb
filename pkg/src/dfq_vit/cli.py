"""Command-line entry point: ``dfq-vit <command> [options]``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, save_student
from .config import load_config, with_overrides
from .data import SyntheticSpec, make_synthetic
from .export import (density_curves, export_samples, mean_block_entropies, write_csv,
                     write_metrics)
from .pipeline import (ConfigError, PipelineConfig, PipelineError, ablation_configs, evaluate,
                       init_noise, run_pipeline)
from .vit import ViTConfig, pretrain_toy


def _err(msg: str) -> None:
    print(f"dfq-vit: error: {msg}", file=sys.stderr)


def _dataset(config: ViTConfig, seed: int):
    spec = SyntheticSpec(image_size=config.image_size, channels=config.channels,
                         n_classes=config.n_classes)
    return make_synthetic(spec, seed)


def _pipeline_config(args) -> PipelineConfig:
    _, cfg = args.loaded
    return with_overrides(cfg, seed=args.seed, w_bits=args.w_bits, a_bits=args.a_bits,
                          alpha=args.alpha, iterations=args.iterations)


def _teacher(args):
    if args.teacher is None:
        raise ConfigError("--teacher <checkpoint> is required")
    return load_checkpoint(args.teacher)


def _log(args):
    return None if args.quiet else (lambda msg: print(msg, file=sys.stderr))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    model, cfg = args.loaded
    seed = cfg.seed if args.seed is None else args.seed
    ds = _dataset(model, args.data_seed)
    params = pretrain_toy(model, ds.train_images, ds.train_labels, epochs=args.epochs,
                          lr=args.lr, seed=seed, log=_log(args))
    save_checkpoint(args.out, params, model)
    print(f"accuracy {evaluate(params, ds.test_images, ds.test_labels, model):.6f}")
    return 0


def cmd_run(args) -> int:
    ckpt = _teacher(args)
    cfg = _pipeline_config(args)
    result = run_pipeline(ckpt.params, ckpt.config, cfg, log=_log(args))
    save_student(args.out, result.student)
    if args.metrics:
        write_metrics(result.metrics, args.metrics, wall_clock=args.wall_clock)
    if args.samples_dir:
        export_samples(result.samples, args.samples_dir)
    print(f"samples seen {result.samples_seen}")
    return 0


def cmd_eval(args) -> int:
    path = args.checkpoint or args.teacher
    if path is None:
        raise ConfigError("a checkpoint path is required")
    ckpt = load_checkpoint(path)
    model = ckpt.quantized_model() if ckpt.quant is not None else ckpt.params
    ds = _dataset(ckpt.config, args.data_seed)
    print(f"accuracy {evaluate(model, ds.test_images, ds.test_labels, ckpt.config):.6f}")
    return 0


def cmd_export_samples(args) -> int:
    ckpt = _teacher(args)
    cfg = _pipeline_config(args)
    if cfg.iterations == 0:
        images = init_noise(ckpt.config, cfg.batch, cfg.seed)
    else:
        images = run_pipeline(ckpt.params, ckpt.config, cfg, log=_log(args)).samples
    paths = export_samples(images, args.out_dir)
    print(f"wrote {len(paths)} images to {args.out_dir}")
    return 0


def cmd_density_curves(args) -> int:
    ckpt = _teacher(args)
    cfg = _pipeline_config(args)
    batch = args.batch or cfg.batch
    if args.inputs == "noise":
        inputs = init_noise(ckpt.config, batch, cfg.seed)
    else:
        inputs = _dataset(ckpt.config, args.data_seed).test_images[:batch]
    density_curves(ckpt.params, ckpt.config, inputs, args.out)
    for l, h in enumerate(mean_block_entropies(ckpt.params, ckpt.config, inputs)):
        print(f"block {l} entropy {h:.6f}")
    return 0


def cmd_ablate(args) -> int:
    ckpt = _teacher(args)
    base = _pipeline_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    ds = _dataset(ckpt.config, args.data_seed)
    rows = []
    for name, cfg in ablation_configs(base).items():
        accs = []
        for seed in seeds:
            result = run_pipeline(ckpt.params, ckpt.config, replace(cfg, seed=seed))
            accs.append(evaluate(result.student, ds.test_images, ds.test_labels))
        rows.append((name, accs))
        print(f"{name:<12} mean {np.mean(accs):.4f}  " + " ".join(f"{a:.4f}" for a in accs))
    if args.out:
        write_csv(args.out, ("variant", "seed", "accuracy"),
                  [(name, s, a) for name, accs in rows for s, a in zip(seeds, accs)])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML file with [model], [quant], [pipeline] tables")
    common.add_argument("--seed", type=int)
    common.add_argument("--w-bits", type=int)
    common.add_argument("--a-bits", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--teacher", type=Path, help="full-precision checkpoint")
    common.add_argument("--iterations", type=int)
    common.add_argument("--data-seed", type=int, default=0, help="synthetic dataset seed")
    common.add_argument("--quiet", action="store_true", help="no progress on stderr")

    parser = argparse.ArgumentParser(prog="dfq-vit",
                                     description="Data-free quantization of a toy vision transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="train the full-precision toy model")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", parents=[common], help="quantize a teacher without data")
    p.add_argument("--out", type=Path, required=True, help="student checkpoint")
    p.add_argument("--metrics", type=Path, help="per-step metrics CSV")
    p.add_argument("--wall-clock", action="store_true", help="fill the wall_ms column")
    p.add_argument("--samples-dir", type=Path, help="also write the final batch as PPM")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", parents=[common], help="held-out accuracy of a checkpoint")
    p.add_argument("checkpoint", type=Path, nargs="?")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-samples", parents=[common], help="write generated images as PPM")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_export_samples)

    p = sub.add_parser("density-curves", parents=[common],
                       help="per-block kernel density of patch similarities")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--inputs", choices=("noise", "real"), default="noise")
    p.add_argument("--batch", type=int)
    p.set_defaults(func=cmd_density_curves)

    p = sub.add_parser("ablate", parents=[common], help="accuracy of each loss combination")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", type=Path, help="CSV of variant, seed, accuracy")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.loaded = load_config(args.config)
        return args.func(args)
    except ConfigError as e:
        _err(str(e))
        return 2
    except (OSError, CheckpointError, PipelineError, ValueError) as e:
        _err(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
