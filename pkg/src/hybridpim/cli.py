"""Command-line entry point: ``hybridpim <command> [--config PATH] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from . import __version__, pipeline
from .config import ConfigError, ExperimentConfig, load
from .container import FormatError
from .sensitivity import EigenConvergenceError
from .train import NonConvergenceError

COMMANDS = {
    "train": "train the preset (or load --config model) and write model + dataset splits",
    "sensitivity": "Hessian-based per-channel sensitivity",
    "select": "greedy channel protection until the noisy accuracy target is met",
    "quantize": "calibrate the two-precision quantization scheme",
    "simulate": "noisy trials, crossbar allocation and digital cycle reports",
    "cost": "area/power/efficiency tables from the component cost table",
    "sweep": "grid over the configured sweep axes, tidy CSV",
    "report": "summary tables from the upstream JSON artifacts",
    "run": "every stage in order",
}
PIPELINE = ("train", "sensitivity", "select", "quantize", "simulate", "cost", "report")


def _workers(value):
    if value is not None:
        return value
    env = os.environ.get(pipeline.WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{pipeline.WORKERS_ENV}={env!r} is not an integer") from None
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridpim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML or JSON experiment config (default: built-in)")
    common.add_argument("--out", metavar="DIR", default="hybridpim-run", help="run directory (default: %(default)s)")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--workers", type=int, metavar="N",
                        help=f"parallel sweep workers (default: ${pipeline.WORKERS_ENV} or 1)")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="tabular output format")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        workers = _workers(args.workers)
        run = pipeline.RunDir(args.out, cfg)
        stages = PIPELINE if args.command == "run" else (args.command,)
        for stage in stages:
            t0 = time.perf_counter()
            files = pipeline.run_stage(stage, run, workers, args.format)
            print(f"{stage}: {', '.join(files)} ({time.perf_counter() - t0:.1f}s)")
    except pipeline.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EigenConvergenceError, NonConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
