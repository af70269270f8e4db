import sys

from loguru import logger

from app.core.config import Settings


def configure_logging(settings: Settings) -> None:
    """Install the stderr sink (and optional file sink) at the configured level"""
    logger.remove()
    logger.add(
        sys.stderr,
        level=settings.LOG_LEVEL.upper(),
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {name}:{line} - {message}",
    )
    if settings.LOG_FILE:
        logger.add(settings.LOG_FILE, level="DEBUG", enqueue=False)
