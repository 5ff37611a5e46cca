"""Command-line entry point: ``f2dc --config desk.ini --mode fedavg --out runs/x``.

Exit codes: 0 success, 2 configuration error, 3 invariant violation.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ExperimentConfig, load_config
from .errors import ConfigError, InvariantViolation
from .runner import run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
PROTOCOL_FLAGS = {"f+": "f+", "f-": "f-", "f*": "f*", "f~": "f~", "plain": "plain"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="f2dc", description="Federated feature decoupling and calibration simulator")
    p.add_argument("--config", metavar="PATH", help="INI config file; unset keys use the built-in defaults")
    p.add_argument("--mode", choices=("f2dc", "fedavg"))
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--out", metavar="DIR", help="output directory for rounds.csv and summary.json")
    p.add_argument("--ablate", action="append", choices=("dfd", "dfc", "daa"), default=[],
                   help="switch a component off (repeatable)")
    p.add_argument("--protocol", choices=tuple(PROTOCOL_FLAGS), help="feature protocol scored at the end")
    p.add_argument("--spectrum", action="store_true", help="report the embedding covariance spectrum")
    p.add_argument("--workers", type=int, help="clients trained concurrently per round")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.rounds is not None:
        overrides["rounds"] = args.rounds
    if args.out:
        overrides["output_dir"] = args.out
    if args.protocol:
        overrides["protocol"] = PROTOCOL_FLAGS[args.protocol]
    if args.spectrum:
        overrides["spectrum"] = True
    if args.workers is not None:
        overrides["workers"] = args.workers
    for switch in args.ablate:
        overrides[f"{switch}_on"] = False
    return cfg.with_overrides(**overrides).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
        result = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    final = result.summary["final"]
    print(f"round {final['round']}: AVG {final['avg']:.4f} STD {final['std']:.4f} -> {cfg.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
