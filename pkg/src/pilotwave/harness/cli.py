"""Command-line entry point: ``pilotwave <kind> --config run.toml --out dir``."""

from __future__ import annotations

import argparse
import sys

from ..equilibrium import ChainFailure, ShiftWidthError
from ..measurement import MeasurementError, SeparationError
from ..polar import NodeError
from ..propagator import CouplingError, PropagationError
from .config import KINDS, ConfigError, load_config
from .runner import run_experiment

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PHYSICS = 2
EXIT_IO = 3

PHYSICS_ERRORS = (NodeError, MeasurementError, PropagationError, CouplingError, ChainFailure, ShiftWidthError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pilotwave", description="Pilot-wave measurement and equilibrium experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in KINDS + ("validate",):
        help_text = "check a config without running it" if name == "validate" else f"run a '{name}' experiment"
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", default=None, help="output directory (default: config output_dir or ./out)")
        p.add_argument("--workers", type=int, default=1, help="worker processes for ensemble runs")
        p.add_argument("--seed", type=int, default=None, help="64-bit seed overriding the config")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError(f"--seed {args.seed} is not an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command == "validate":
            print(f"ok: kind={cfg.kind} config_hash={cfg.config_hash()}")
            return EXIT_OK
        if args.command != cfg.kind:
            raise ConfigError(f"subcommand '{args.command}' does not match config kind '{cfg.kind}'")
        report = run_experiment(cfg, args.out, workers=args.workers)
    except (ConfigError, SeparationError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PHYSICS_ERRORS as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_PHYSICS
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    for c in report.checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name} {c.detail}".rstrip())
    print(f"wrote {len(report.files)} files (config_hash={report.config_hash})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
