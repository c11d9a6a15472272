"""Command-line entry point: ``mrds <subcommand> --config PATH``.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .errors import ConfigError, NumericalError, RDSError
from .experiments import CANNED, SUBCOMMANDS, dumps, run

log = logging.getLogger("markovian_rds")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrds",
        description="Markovian random dynamical systems: simulation, Lyapunov certificates, Ulam spectra.",
    )
    parser.add_argument("subcommand", choices=sorted(SUBCOMMANDS))
    parser.add_argument("--config", required=True, help=f"config file, or one of: {', '.join(CANNED)}")
    parser.add_argument("--out", type=Path, default=None, help="output directory (default: JSON to stdout)")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for replicate loops")
    parser.add_argument("--format", choices=("json", "csv"), default="json", help="csv also writes tables")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def write_outputs(out: Path, subcommand: str, report: dict, tables: dict, fmt: str) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    target = out / f"{subcommand}.json"
    target.write_text(dumps(report))
    written.append(target)
    for name, payload in sorted(tables.items()):
        if name.startswith("_"):
            path = out / name[1:]
            path.write_text(payload)
        elif fmt == "csv":
            path = out / f"{name}.csv"
            _write_csv(path, *payload)
        else:
            continue
        written.append(path)
    return written


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report, tables = run(args.subcommand, args.config, seed=args.seed, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure in {args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RDSError as exc:
        print(f"{args.subcommand} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if args.out is None:
        sys.stdout.write(dumps(report))
    else:
        for path in write_outputs(args.out, args.subcommand, report, tables, args.format):
            log.info("wrote %s", path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
