"""
Command-line entry point for the flow-equation experiments.

    python main.py selftest
    python main.py convergence --config run.cfg --out results --threads 4
"""
import argparse
import logging
from dataclasses import replace
from typing import Optional, Sequence

from data.models import FlowError, RunConfig
from services.experiments import COMMANDS
from utils.logging_utils import setup_logging

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Perturbative flow-equation engine: OPE convergence, factorization and bound checks.")
    parser.add_argument('command', choices=sorted(COMMANDS), help="experiment to run")
    parser.add_argument('--config', help="flat 'key = value' run configuration file")
    parser.add_argument('--out', help="output directory (overrides the configuration)")
    parser.add_argument('--threads', type=int, help="worker threads for independent rows")
    parser.add_argument('--tolerance', type=float, help="numerical tolerance for the assertions")
    parser.add_argument('--verbose', action='store_true', help="debug logging")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """The file configuration (or the defaults) with command-line overrides applied."""
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {'experiment': args.command}
    if args.out is not None:
        overrides['output'] = args.out
    if args.threads is not None:
        overrides['threads'] = args.threads
    if args.tolerance is not None:
        overrides['tolerance'] = args.tolerance
    return replace(cfg, **overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = load_config(args)
    except (FlowError, OSError) as e:
        logger.error(f"Invalid configuration: {e}")
        return 1

    logger.info(f"Running {cfg.experiment} (output: {cfg.output}, threads: {cfg.threads})")
    try:
        passed = COMMANDS[cfg.experiment](cfg)
    except FlowError as e:
        logger.error(f"{cfg.experiment} failed: {e}")
        return 1
    logger.info(f"{cfg.experiment}: {'all assertions hold' if passed else 'assertions FAILED'}")
    return 0 if passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
