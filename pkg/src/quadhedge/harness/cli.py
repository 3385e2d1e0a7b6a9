"""Command line entry point: ``quadhedge <subcommand> --config FILE``."""
from __future__ import annotations

import argparse
import sys

from ..errors import NumericalError, ValidationError
from .config import KINDS, read_config
from .emit import emit
from .experiments import StageError, run

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quadhedge", description="Super-replication under quadratic costs.")
    sub = ap.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--seed", type=_u64, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = read_config(args.config, kind=args.command, seed=args.seed, out=args.out, threads=args.threads)
        tables = run(config)
        path = emit(tables, config, args.command)
    except ValidationError as exc:
        print(f"quadhedge: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as exc:
        print(f"quadhedge: {exc}", file=sys.stderr)
        if isinstance(exc.cause, ValidationError):
            return EXIT_VALIDATION
        return EXIT_NUMERICAL if isinstance(exc.cause, NumericalError) else 1
    except NumericalError as exc:
        print(f"quadhedge: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for t in tables:
        verdicts = " ".join(f"{k}={'pass' if v else 'FAIL'}" for k, v in t.verdicts.items())
        print(f"{t.name}: {len(t.rows)} rows {verdicts}".rstrip())
    print(f"summary: {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
