"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 constraint budget exhausted,
4 oracle/harness failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .harness import HarnessError
from .pareto import OracleError
from . import pipeline

log = logging.getLogger("energynas")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="energynas", description="Energy-aware architecture search pipeline")
    p.add_argument("--config", help="run config (JSON)")
    p.add_argument("--seed-override", type=int, default=None, help="replace every configured seed with this value")
    p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("space", help="enumerate/validate the search space and write the pool")
    sub.add_parser("calibrate", help="adapt a zoo predictor to the target device")
    sub.add_parser("search", help="run the Pareto search and select best models")
    sub.add_parser("measure", help="measure pool architectures on the target device")
    rep = sub.add_parser("report", help="summarize a search ledger into point files and a table")
    rep.add_argument("--ledger", default=None, help="ledger path (default: <out>/ledger_search.jsonl)")
    return p


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2, default=str))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "report":
        if args.ledger is None and args.out is None and args.config is None:
            print("error: report needs --ledger, --out or --config", file=sys.stderr)
            return pipeline.EXIT_CONFIG
        out = Path(args.out) if args.out else None
        if out is None and args.config:
            try:
                out = load_config(args.config).out_dir
            except ConfigError as exc:
                print(f"config error: {exc}", file=sys.stderr)
                return pipeline.EXIT_CONFIG
        ledger = Path(args.ledger) if args.ledger else out / "ledger_search.jsonl"
        if not ledger.exists():
            print(f"error: ledger not found: {ledger}", file=sys.stderr)
            return pipeline.EXIT_CONFIG
        _print(pipeline.cmd_report(ledger, (out or ledger.parent) / "report"))
        return pipeline.EXIT_OK

    if not args.config:
        print("error: --config is required", file=sys.stderr)
        return pipeline.EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed_override, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return pipeline.EXIT_CONFIG

    try:
        if args.command == "space":
            _print(pipeline.cmd_space(cfg))
        elif args.command == "calibrate":
            _print(pipeline.cmd_calibrate(cfg))
        elif args.command == "measure":
            _print(pipeline.cmd_measure(cfg))
        elif args.command == "search":
            code, summary = pipeline.cmd_search(cfg)
            summary.pop("state")
            _print(summary)
            if code == pipeline.EXIT_BUDGET:
                print("budget exhausted: no front entry met the constraints; best-so-far reported", file=sys.stderr)
            return code
    except (OracleError, HarnessError) as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return pipeline.EXIT_ORACLE
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return pipeline.EXIT_CONFIG
    return pipeline.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
