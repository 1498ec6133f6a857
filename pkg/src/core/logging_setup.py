"""Logging setup."""

import logging

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = "INFO") -> None:
    """Route all log records to stderr; stdout carries command results only."""
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, force=True)
