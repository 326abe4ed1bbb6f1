"""
Structured logging configuration with Loguru
"""
import sys
from pathlib import Path
from typing import Optional

from loguru import logger

from src.config import settings


def setup_logging(level: Optional[str] = None, log_dir: Optional[Path] = None) -> None:
    """
    Configure Loguru for structured logging.

    Args:
        level: Override for the configured log level
        log_dir: Directory for file sinks; defaults to settings.log_dir when
            file logging is enabled
    """
    level = level or settings.log_level

    # Remove default handler
    logger.remove()

    if settings.log_format == "json":
        logger.add(sys.stderr, level=level, serialize=True)
    else:
        logger.add(
            sys.stderr,
            format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> | <level>{message}</level>",
            level=level,
            colorize=True,
        )

    if log_dir is None and not settings.log_to_file:
        logger.debug(f"Logging initialized - Level: {level}, Format: {settings.log_format}")
        return

    # File handler - always JSON for parsing
    logs_dir = Path(log_dir or settings.log_dir)
    logs_dir.mkdir(parents=True, exist_ok=True)

    logger.add(
        logs_dir / "netmpc_{time:YYYY-MM-DD}.log",
        level=level,
        rotation="100 MB",
        retention="30 days",
        compression="zip",
        serialize=True,
    )

    # Error log file
    logger.add(
        logs_dir / "netmpc_errors_{time:YYYY-MM-DD}.log",
        level="ERROR",
        rotation="50 MB",
        retention="90 days",
        compression="zip",
        serialize=True,
    )

    logger.debug(f"Logging initialized - Level: {level}, Format: {settings.log_format}")


def get_logger(name: str):
    """Get a logger instance with the given name."""
    return logger.bind(name=name)
