"""
Logging utilities for the flow engine.
"""
import logging


def setup_logging(level: int = logging.INFO):
    """
    Configure logging for the command-line runs.

    Args:
        level: root logging level (DEBUG when --verbose is passed)

    Returns:
        Logger instance
    """
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    logger = logging.getLogger(__name__)
    logger.debug(f"Logging configured at level {logging.getLevelName(level)}")
    return logger
