"""Logging configuration for the application."""
import logging
import sys
from typing import Optional
from pathlib import Path
from src.config import LOG_LEVEL, LOG_FILE


def setup_logging(log_file: Optional[Path] = LOG_FILE, level: str = LOG_LEVEL):
    """Configure logging for the application."""
    # Create formatter
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # Replace handlers from an earlier call
    for handler in list(root_logger.handlers):
        if getattr(handler, "_bundle_forge", False):
            root_logger.removeHandler(handler)
            handler.close()

    # Console handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    console_handler._bundle_forge = True
    root_logger.addHandler(console_handler)

    # File handler
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        file_handler._bundle_forge = True
        root_logger.addHandler(file_handler)

    # Suppress noisy libraries
    logging.getLogger("torch").setLevel(logging.WARNING)

    return root_logger


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance with the specified name."""
    return logging.getLogger(name)
