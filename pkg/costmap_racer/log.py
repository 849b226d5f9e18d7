import logging

from rich.console import Console
from rich.logging import RichHandler

from costmap_racer.config import Settings, get_settings

PACKAGE_LOGGER = "costmap_racer"

console = Console(stderr=True)


def configure_logging(settings: Settings | None = None, quiet: bool = False) -> logging.Logger:
    """Install a single rich handler on the package logger."""
    if settings is None:
        settings = get_settings()

    logger = logging.getLogger(PACKAGE_LOGGER)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    handler = RichHandler(console=console, show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.WARNING if quiet else settings.LOG_LEVEL)
    logger.propagate = False
    return logger
