"""
Logging Configuration - Console and file output plus key=value event lines
"""

import logging
import sys
from typing import Any, Optional


def setup_logger(
    name: str,
    level: str = "INFO",
    log_file: Optional[str] = None,
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
) -> logging.Logger:
    """
    Configure and return a logger with console and optional file output.

    Console output goes to stderr so that tables printed on stdout stay clean.

    Args:
        name: Logger name ("layerprune" configures the whole package tree)
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional file path for log output
        log_format: Log message format string

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    numeric_level = getattr(logging, level.upper())
    logger.setLevel(numeric_level)

    # Remove existing handlers to avoid duplicates
    logger.handlers.clear()

    formatter = logging.Formatter(log_format)
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(numeric_level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(numeric_level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger under the package namespace.

    Module names like "src.distill" are re-rooted to "layerprune.distill" so
    that one `setup_logger("layerprune")` call governs every module.
    """
    if name.startswith("src."):
        name = "layerprune." + name[len("src."):]
    return logging.getLogger(name)


def format_fields(**fields: Any) -> str:
    parts = []
    for key, value in fields.items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.6g}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


def log_event(logger: logging.Logger, event: str, level: int = logging.INFO, **fields: Any) -> None:
    """Log `event key=value ...` with stable float formatting."""
    if logger.isEnabledFor(level):
        logger.log(level, "%s %s", event, format_fields(**fields))
