# src/utils/logging_setup.py

import os
import json
import logging

LOG_FORMAT = "%(asctime)s [%(levelname)s] [%(name)s] %(message)s"

logger = logging.getLogger("mlns")


def configure_logging(level: str | None = None) -> None:
    """Configure root logging once; level falls back to MLNS_LOG_LEVEL, then INFO."""
    level_name = (level or os.getenv("MLNS_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO), format=LOG_FORMAT)


def trace(msg: str, extra: dict | None = None, log: logging.Logger | None = None):
    """Helper for structured logging"""
    log = log or logger
    if extra:
        log.info(f"{msg} | {json.dumps(extra, ensure_ascii=False, default=str)}")
    else:
        log.info(msg)
