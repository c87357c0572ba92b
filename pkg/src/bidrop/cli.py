"""Command-line entry point.

    bidrop run --config run.cfg [--out DIR] [--dump-masks]
    bidrop protocol --name noise --config base.cfg [--out DIR] [--dump-masks]
    bidrop verify

Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
import sys

from .config import ConfigError, load_config
from .data import DatasetError
from .experiment import PROTOCOLS, emit_report, format_comparison, run_experiment, run_protocol

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bidrop", description="Selective sub-net fine-tuning experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train every seed of one config and write reports")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", type=Path, default=Path("out"))
    run.add_argument("--dump-masks", action="store_true", help="write each seed's final mask under OUT/masks/")
    run.add_argument("--quiet", action="store_true", help="only print errors")

    proto = sub.add_parser("protocol", help="expand a base config over a protocol grid")
    proto.add_argument("--name", required=True, choices=PROTOCOLS)
    proto.add_argument("--config", required=True, type=Path)
    proto.add_argument("--out", type=Path, default=None)
    proto.add_argument("--dump-masks", action="store_true")
    proto.add_argument("--quiet", action="store_true", help="only print errors")

    verify = sub.add_parser("verify", help="run the acceptance property suite")
    verify.add_argument("--quiet", action="store_true", help="only print errors")
    return parser


def _package_logger() -> logging.Logger:
    logger = logging.getLogger("bidrop")
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)
        logger.propagate = False
    return logger


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logger = _package_logger()
    previous = logger.level
    logger.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        return _dispatch(args)
    finally:
        logger.setLevel(previous)


def _dispatch(args) -> int:
    echo = (lambda *_: None) if args.quiet else print

    if args.command == "verify":
        from .verify import run_checks

        results = run_checks(echo=echo)
        failed = [r for r in results if not r.passed]
        echo(f"{len(results) - len(failed)}/{len(results)} checks passed")
        return EXIT_RUNTIME if failed else EXIT_OK

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"bidrop: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    base_dir = args.config.resolve().parent
    out = args.out if args.out is not None else Path("out") / args.name
    mask_dir = out / "masks" if args.dump_masks else None
    try:
        if args.command == "run":
            report = run_experiment(config, base_dir=base_dir, mask_dir=mask_dir)
        else:
            report = run_protocol(args.name, config, base_dir=base_dir, mask_dir=mask_dir)
    except (ConfigError, DatasetError) as exc:
        print(f"bidrop: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, FloatingPointError, ValueError) as exc:
        print(f"bidrop: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    try:
        json_path, csv_path = emit_report(report, out)
    except Exception as exc:
        print(f"bidrop: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    echo(format_comparison(report))
    echo(f"wrote {json_path} and {csv_path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
