"""
Centralized logging configuration for rgbd-volume.
"""

import logging
import sys

from utils.config import CFG

# Track whether logging has been configured
_logging_configured = False


def setup_logging(verbose: bool = False) -> None:
    """
    Configure logging for the application.
    Should be called once at startup, not during module import.

    Args:
        verbose: Force DEBUG level regardless of the RGBDVOL_DEBUG setting
    """
    global _logging_configured
    if _logging_configured:
        return

    debug = verbose or CFG.get("debug")
    # stdout carries command results, so log records go to stderr
    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s", handlers=[logging.StreamHandler(sys.stderr)])

    if debug:
        logging.getLogger("PIL").setLevel(logging.INFO)

    _logging_configured = True


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger instance for a module.

    Args:
        name: Module name (usually __name__)

    Returns:
        Configured logger instance
    """
    return logging.getLogger(name)
