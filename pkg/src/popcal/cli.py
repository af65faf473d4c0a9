"""Command line entry point: ``popcal run --config audit.ini`` or one stage at a time."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .config import load_config
from .pipeline import STAGES, StageError, run_pipeline, run_stage
from .recommenders import ConfigError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", required=True, help="pipeline config (INI)")
    common.add_argument("--seed", type=int, help="override split and model seeds")
    common.add_argument("--out", help="override output directory")
    common.add_argument("--jobs", "-j", type=int, default=1, help="worker processes per stage")
    common.add_argument(
        "--algo", action="append", metavar="NAME", help="restrict to a configured algorithm (repeatable)"
    )
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(
        prog="popcal",
        description="Train recommenders and audit popularity lift and miscalibration by user cohort.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run every stage")
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage only")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out, algos=args.algo)
    except ConfigError as e:
        print(f"popcal: config error: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        if args.command == "run":
            run_pipeline(cfg, jobs=args.jobs)
        else:
            run_stage(args.command, cfg, jobs=args.jobs)
    except StageError as e:
        print(f"popcal: {e}", file=sys.stderr)
        return EXIT_VALIDATION if e.validation else EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
