"""Command-line front end: ``python -m src <command> --config PATH``."""

import argparse
import asyncio
import json
import logging
import sys
from typing import Any, Dict, List, Optional

import structlog
from structlog.processors import JSONRenderer

from .commands import DfrcCommands
from .config import ConfigManager
from .error_handler import ConfigError, ErrorHandler

logger = structlog.get_logger(__name__)

COMMANDS = (
    "beampattern",
    "verify-ici",
    "crb",
    "allocate",
    "select",
    "alternate",
    "tradeoff",
    "heatmap",
    "receivers",
)


def configure_logging(level: str = "INFO") -> None:
    """Structured JSON logs on stderr at the given standard level name."""
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            JSONRenderer(),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )
    logging.basicConfig(format="%(message)s", stream=sys.stderr, force=True)
    logging.getLogger().setLevel(level.upper())


class _ArgumentParser(argparse.ArgumentParser):
    """Argument errors are configuration errors, not argparse's exit 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="dfrc",
        description="Subcarrier, power and radar receiver optimization for MIMO-OFDM DFRC",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument(
        "--config",
        default="desk_default",
        help="JSON/TOML config file or preset name (paper_default, desk_default, lemma_default)",
    )
    parser.add_argument("--out", help="Output directory for CSV artifacts")
    parser.add_argument("--seed", type=int, help="RNG seed (falls back to DFRC_SEED)")
    parser.add_argument("--tol", type=float, help="Conic solver tolerance")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "experiment.output_dir": args.out,
        "experiment.seed": args.seed,
        "solver.tol": args.tol,
    }


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Run one command and return the process exit code.

    Exit codes: 0 success, 2 infeasible, 3 configuration error, 4 numerical
    failure, 1 anything else.
    """
    error_handler = ErrorHandler()
    argv = list(sys.argv[1:] if argv is None else argv)
    configure_logging("WARNING" if "--quiet" in argv else "INFO")

    try:
        args = build_parser().parse_args(argv)
        manager = ConfigManager(args.config, overrides=_overrides(args))
        commands = DfrcCommands(manager, error_handler)
        result = asyncio.run(commands.execute_command(args.command))
    except Exception as e:
        response = error_handler.format_error_response(e)
        logger.error("Command failed", error=str(e), error_type=response["error_type"])
        print(json.dumps(response, indent=2, default=str), file=sys.stderr)
        return response["exit_code"]

    if not args.quiet:
        print(json.dumps(result, indent=2, default=str))
    return 0


def main() -> None:
    sys.exit(run_cli())
