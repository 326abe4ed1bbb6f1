"""
netmpc command-line entry point

    netmpc train|dual-check|compare --config <path> [--out <dir>] [--seed k]
        [--threads n] [--no-plots]

Exit status: 0 on success, 1 on solver or training failure, 2 on an invalid
or missing configuration.
"""
import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from src.cli.commands import COMMANDS, CommandContext
from src.cli.run_config import ConfigError, RunConfig, load_run_config
from src.config import settings
from src.learning.q_learning import StaleDuals, TrainingAborted
from src.optim.admm import ConsensusError
from src.optim.qp import QpError
from src.utils.logging import get_logger, setup_logging

logger = get_logger(__name__)

HELP = {
    "train": "Learn the MPC parameters with distributed Q-learning",
    "dual-check": "Dual recovery error of consensus ADMM against the centralized solution",
    "compare": "Closed-loop comparison with nominal and scenario MPC",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netmpc",
        description="Multi-agent Q-learning with a distributed MPC function approximator",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text in HELP.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, required=True, help="YAML run configuration")
        sub.add_argument("--out", type=Path, default=None, help="Output directory")
        sub.add_argument("--seed", type=int, default=None, help="Override the configured seed")
        sub.add_argument("--threads", type=int, default=None, help="Worker thread cap")
        sub.add_argument("--no-plots", action="store_true", help="Write CSV artifacts only")
        sub.add_argument(
            "--log-level",
            default=None,
            choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        )
    return parser


def resolve_output_dir(out: Optional[Path], config: RunConfig) -> Path:
    """--out, then NETMPC_OUTPUT_DIR, then the config file."""
    if out is not None:
        return out
    if settings.output_dir:
        return Path(settings.output_dir)
    return Path(config.output_dir)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        config = load_run_config(args.config)
        if args.seed is not None:
            config = config.model_copy(update={"seed": args.seed})
        threads = args.threads if args.threads is not None else settings.threads
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        ctx = CommandContext(
            config=config,
            out_dir=resolve_output_dir(args.out, config),
            threads=threads,
            plots=config.plots and not args.no_plots,
        )
        return COMMANDS[args.command](ctx)
    except ConfigError as exc:
        logger.error(f"{args.command}: configuration error: {exc}")
        return 2
    except (TrainingAborted, QpError, ConsensusError, StaleDuals) as exc:
        logger.error(f"{args.command} failed: {type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
