"""Command line: ``seamvae run <config.json>`` and ``seamvae report <run-dir>``.

Exit codes: 0 success, 1 validation or corrupt-run error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import sys

from .exceptions import (CorruptRun, DegenerateModel, DegenerateSpectrum, GeometryInconsistent,
                         InvalidInput, NumericalFailure, PreconditionFailed)
from .experiments import report, run

_VALIDATION = (InvalidInput, CorruptRun, PreconditionFailed)
_NUMERICAL = (NumericalFailure, DegenerateSpectrum, DegenerateModel, GeometryInconsistent)


def build_parser():
    parser = argparse.ArgumentParser(prog="seamvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment from a JSON config")
    p_run.add_argument("config")
    p_rep = sub.add_parser("report", help="write summary.md for a finished run")
    p_rep.add_argument("run_dir")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            record = run(args.config)
            print(f"{record.experiment}: {len(record.manifest)} files, "
                  f"config hash {record.config_hash[:12]}")
        else:
            sys.stdout.write(report(args.run_dir))
    except _VALIDATION as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _NUMERICAL as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
