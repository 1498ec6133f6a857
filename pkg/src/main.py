"""
langsim - Command-line entry point
Language similarity measures for cross-lingual speech transfer.
"""

import argparse
import logging
import sys
from collections.abc import Sequence

from src import __version__
from src.cli.commands import distances, embeddings, evaluation, features, training
from src.cli.context import CommandContext, RunConfig, validated
from src.core.config import DEFAULT_CONFIG_FILE, get_settings
from src.core.errors import LangSimError, UsageError
from src.core.logging_setup import configure_logging
from src.core.metrics import RunMetrics

logger = logging.getLogger(__name__)

COMMAND_MODULES = (features, training, embeddings, distances, evaluation)
NUMERIC_OVERRIDES = ("lr", "epochs", "batch", "alpha", "tau", "k")


class ArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting on bad flags."""

    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="langsim",
        description="Acoustic and linguistic language similarity for cross-lingual transfer.",
    )
    parser.add_argument("--config", default=DEFAULT_CONFIG_FILE, help="settings YAML")
    parser.add_argument("--log-level", help="override LOG_LEVEL")
    parser.add_argument("--metrics-file", help="write run gauges in textfile format")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    # Register command modules
    for module in COMMAND_MODULES:
        module.register(subparsers)
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        name: getattr(args, name)
        for name in NUMERIC_OVERRIDES
        if getattr(args, name, None) is not None
    }
    out = getattr(args, "out", None)
    return validated(
        RunConfig,
        command=args.command,
        seed=getattr(args, "seed", None),
        out=str(out) if out is not None else None,
        overrides=overrides,
    ).check()


def main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        settings = get_settings(args.config)
        configure_logging(args.log_level or settings.LOG_LEVEL)
        run = _run_config(args)
        logger.debug(f"Run config: {run.model_dump_json()}")
        ctx = CommandContext(settings=settings, metrics=RunMetrics(), run=run)
        code = args.handler(args, ctx)
        ctx.metrics.write(args.metrics_file or settings.METRICS_FILE)
        return code
    except LangSimError as e:
        logger.debug("Command failed", exc_info=True)
        print(e.one_line(), file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
