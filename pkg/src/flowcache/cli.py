"""Command-line interface for the full pipeline.

Subcommands:
    train-base        train the instantaneous-velocity teacher
    distill-cfg       distill guided sampling into one student
    distill-meanflow  interval-restricted mean-velocity distillation
    train-predictor   cache predictor (MSE phase + adversarial phase)
    sample            generate samples from a distilled checkpoint
    bench             benchmark caching strategies, append metrics CSV
    verify            run the fast invariant battery

Exit codes: 0 success; 2 config error; 3 checkpoint lineage/integrity
error (bad parentage, digest mismatch, unsupported version); 4 numeric
failure. All state comes from the config file and flags; environment
variables are never consulted.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import default_config, load_config
from .errors import (CheckpointError, ConfigError, ContractViolation,
                     NumericFailure)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_LINEAGE = 3
EXIT_NUMERIC = 4


def _add_common(p, checkpoint=False, checkpoints=False):
    p.add_argument("--config", type=Path, default=None,
                   help="JSON experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", type=Path, default=Path("runs"),
                   help="output directory")
    if checkpoint:
        p.add_argument("--checkpoint", type=Path, required=True,
                       help="input checkpoint for this stage")
    if checkpoints:
        p.add_argument("--checkpoint", type=Path, action="append",
                       required=True,
                       help="input checkpoint (repeatable: mean-velocity "
                            "model first, predictor second)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcache",
        description="distillation + learnable-caching lab for toy flows")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("train-base", help="train the base velocity field"))
    _add_common(sub.add_parser("distill-cfg", help="guided-mixture distillation"),
                checkpoint=True)
    _add_common(sub.add_parser("distill-meanflow",
                               help="restricted mean-velocity distillation"),
                checkpoint=True)
    _add_common(sub.add_parser("train-predictor", help="cache predictor training"),
                checkpoint=True)
    _add_common(sub.add_parser("sample", help="generate and dump samples"),
                checkpoints=True)
    _add_common(sub.add_parser("bench", help="benchmark caching strategies"),
                checkpoints=True)
    verify_p = sub.add_parser("verify", help="run the invariant battery")
    verify_p.add_argument("--seed", type=int, default=0)
    return parser


def _config_for(args):
    config = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    return config


def _dispatch(args) -> int:
    from . import runner

    if args.command == "verify":
        from .verify import run_all
        return EXIT_OK if run_all(args.seed) else 1

    config = _config_for(args)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.command == "train-base":
        path = runner.run_train_base(config, args.out / "base.fck")
        print(f"wrote {path}")
    elif args.command == "distill-cfg":
        path = runner.run_distill_cfg(config, args.checkpoint,
                                      args.out / "cfg.fck")
        print(f"wrote {path}")
    elif args.command == "distill-meanflow":
        path = runner.run_distill_meanflow(config, args.checkpoint,
                                           args.out / "meanflow.fck")
        print(f"wrote {path}")
    elif args.command == "train-predictor":
        pred, disc = runner.run_train_predictor(
            config, args.checkpoint, args.out / "predictor.fck",
            args.out / "discriminator.fck")
        print(f"wrote {pred}")
        print(f"wrote {disc}")
    elif args.command in ("sample", "bench"):
        meanflow = args.checkpoint[0]
        predictor = args.checkpoint[1] if len(args.checkpoint) > 1 else None
        if args.command == "sample":
            from dataclasses import replace
            config = replace(config, emit_samples=True)
        records = runner.run_experiment(config, meanflow, predictor,
                                        out_dir=args.out)
        for rec in records:
            print(f"{rec.run_id}: w2={rec.w2:.5f} "
                  f"energy={rec.energy_distance:.5f} "
                  f"nfe={rec.full_evals}+{rec.predictor_evals} "
                  f"cache_bytes={rec.cache_bytes_peak}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_LINEAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractViolation as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
