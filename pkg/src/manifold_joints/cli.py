"""Command-line entry point: ``manifold-joints <gen|distfield|solve|eval|hip>``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .pipeline import PipelineConfig

logger = logging.getLogger("manifold_joints")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # shared by the top-level parser and every subcommand so flags work in either position
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default, help="YAML pipeline config")
    p.add_argument("--seed", type=int, default=default)
    p.add_argument("--workers", type=int, default=default, help="parallel frame workers")
    p.add_argument("--out", default=default, help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manifold-joints", parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_global_flags(True)]

    sub.add_parser("gen", parents=common, help="render synthetic scan frames")

    p = sub.add_parser("distfield", parents=common, help="compute distance fields per frame")
    p.add_argument("dataset")

    p = sub.add_parser("solve", parents=common, help="estimate joints from distance fields")
    p.add_argument("dataset")
    p.add_argument("--source", default="oracle", help="oracle, noise, or a .dfld file/directory")
    p.add_argument("--sigma", type=float, help="noise level in metres for --source noise")
    p.add_argument("--k", type=int, help="area-of-interest size")

    p = sub.add_parser("eval", parents=common, help="score estimates against ground truth")
    p.add_argument("dataset")
    p.add_argument("estimates")

    p = sub.add_parser("hip", parents=common, help="leave-one-out hip-height regression")
    p.add_argument("features_csv")
    p.add_argument("--margin", type=float, default=3.0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "k": getattr(args, "k", None),
        "sigma": getattr(args, "sigma", None),
    }
    try:
        cfg = PipelineConfig.load(args.config, **overrides)
        if args.command == "gen":
            out = pipeline.cmd_gen(cfg, args.out)
            print(out)
        elif args.command == "distfield":
            for r in pipeline.cmd_distfield(cfg, args.dataset):
                logger.info("%s: n=%d m=%d", r["id"], r["n"], r["m"])
        elif args.command == "solve":
            out, failures = pipeline.cmd_solve(cfg, args.dataset, args.source, args.out)
            if failures:
                for f in failures:
                    print(f"FAILED {f}", file=sys.stderr)
                return 1
            print(out)
        elif args.command == "eval":
            pipeline.cmd_eval(args.dataset, args.estimates, args.out)
        elif args.command == "hip":
            pipeline.cmd_hip(args.features_csv, cfg, args.out, args.margin)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
