"""Command-line front end: ``flcarbon run|sweep|validate``.

Exit codes: 0 success, 2 configuration/validation error, 3 optimizer divergence.
Log verbosity comes from ``FLCARBON_LOG`` (error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, RunConfig, SweepSpec, dump_yaml, load_any, load_run_config, load_sweep_spec
from .model import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = _LEVELS.get(os.environ.get("FLCARBON_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def cmd_run(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    try:
        result = harness.run(config)
    except harness.RunDivergedError as exc:
        harness.write_run(exc.partial, args.out)
        print(f"error: optimizer diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    harness.write_run(result, args.out)
    s = result.summary
    print(
        f"{s['protocol']}: {s['rounds_executed']} rounds ({s['stop_reason']}), "
        f"accuracy {s['final_accuracy']:.4f}, C_tot {s['c_tot_kg']:.6g} kg"
    )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = load_sweep_spec(args.config)
    out = Path(args.out)
    rows = harness.sweep(spec, jobs=max(1, args.jobs), out_dir=out)
    _write_text(out / "sweep.csv", harness.sweep_csv(spec, rows))
    print(f"{len(rows)} cells written to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    config: RunConfig | SweepSpec = load_any(args.config)
    sys.stdout.write(dump_yaml(config))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flcarbon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one run and write rounds.csv and summary.json")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="execute a grid of runs and write sweep.csv")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="parse, validate and print the effective config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: optimizer diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
