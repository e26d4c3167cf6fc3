import logging
from typing import Optional

from app.core.config import settings


def configure_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once for command-line runs"""
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format=settings.LOG_FORMAT,
        force=True,
    )
    # numerical libraries are chatty at DEBUG
    logging.getLogger("PIL").setLevel(logging.WARNING)
