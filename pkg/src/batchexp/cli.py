"""Command-line entry point.

    batchexp run CONFIG.json [--output PATH] [--workers N]
    batchexp validate CONFIG.json
    batchexp list-agents | list-envs | list-objectives | list-constraints

Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .agents import AGENT_KINDS
from .environments import FAMILY_NAMES
from .errors import ConfigError, IngestionError
from .harness import load_config, run_benchmark, validate_config
from .objectives import CONSTRAINT_NAMES, OBJECTIVE_NAMES

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="batchexp", description="Benchmark batched adaptive-experiment policies.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a benchmark config and write the CSV report")
    run.add_argument("config")
    run.add_argument("--output", help="report path (overrides the config's output field)")
    run.add_argument("--workers", type=int, help="worker processes for replications")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    sub.add_parser("list-agents")
    sub.add_parser("list-envs")
    sub.add_parser("list-objectives")
    sub.add_parser("list-constraints")
    return parser


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    listing = {
        "list-agents": AGENT_KINDS,
        "list-envs": FAMILY_NAMES,
        "list-objectives": OBJECTIVE_NAMES,
        "list-constraints": CONSTRAINT_NAMES,
    }
    if args.command in listing:
        print("\n".join(listing[args.command]))
        return EXIT_OK

    try:
        cfg = load_config(args.config)
        validate_config(cfg)
    except (ConfigError, IngestionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print("ok")
        return EXIT_OK

    if args.workers is not None:
        if args.workers < 1:
            print("usage error: --workers must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        cfg = replace(cfg, workers=args.workers)
    output = args.output or cfg.output
    if not output:
        print("usage error: no output path (set 'output' in the config or pass --output)", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = run_benchmark(cfg, output if args.output else None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for row in report.rows:
        print(f"{row.agent:>14s}  {row.objective:<20s} {row.mean: .5g} +- {row.se:.3g}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
