"""Process-wide defaults resolved from the environment (optionally a .env file)."""
from __future__ import annotations

import logging
import os
import sys
from typing import Optional

from dotenv import load_dotenv

_LOG_FORMAT = "[%(name)s] %(levelname)s: %(message)s"
_DEFAULT_MAX_FRAME_SIZE = 4 * 1024 * 1024


def load_environment(env_file: Optional[str] = None) -> None:
    # Values already exported win over the .env file
    try:
        if env_file:
            load_dotenv(env_file, override=False)
        else:
            load_dotenv(override=False)
    except Exception:
        pass


def _float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return float(raw)
    except ValueError:
        logging.getLogger(__name__).warning("ignoring %s=%r (not a number)", name, raw)
        return default


def log_level() -> str:
    return (os.getenv("GRIDPIPE_LOG_LEVEL") or "INFO").strip().upper()


def max_frame_size() -> int:
    return int(_float("GRIDPIPE_MAX_FRAME_SIZE", _DEFAULT_MAX_FRAME_SIZE))


def connect_timeout() -> float:
    return _float("GRIDPIPE_CONNECT_TIMEOUT", 10.0)


def receipt_timeout() -> float:
    return _float("GRIDPIPE_RECEIPT_TIMEOUT", 10.0)


def stop_grace() -> float:
    return _float("GRIDPIPE_STOP_GRACE", 10.0)


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever sys.stderr is at emit time."""

    @property
    def stream(self):  # type: ignore[override]
        return sys.stderr

    @stream.setter
    def stream(self, value) -> None:
        pass


def configure_logging(level: Optional[str] = None) -> logging.Logger:
    """Attach one stderr handler to the ``gridpipe`` logger (idempotent)."""
    logger = logging.getLogger("gridpipe")
    resolved = (level or log_level()).upper()
    logger.setLevel(getattr(logging, resolved, logging.INFO))
    if not any(getattr(h, "_gridpipe", False) for h in logger.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        handler._gridpipe = True  # type: ignore[attr-defined]
        logger.addHandler(handler)
    return logger
