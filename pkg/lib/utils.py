"""
Logging setup and small run helpers.

setup_logging sends every record to the console and a timestamped file. The
file keeps DEBUG from this package (lib, helpers, tests, the runner) and only
INFO+ from numpy/scipy/asyncio and friends, so per-step solver traces stay
readable.
"""
from datetime import datetime
from logging import DEBUG, INFO, WARNING, FileHandler, Filter, Formatter, Logger, LogRecord, basicConfig, getLogger
from pathlib import Path
from typing import Mapping

from config import LOG_PATH

PROJECT_PREFIXES = ("lib.", "helpers.", "tests.", "__main__")
LOG_FORMAT = "%(asctime)s %(levelname)s:%(name)s:%(funcName)s(): %(message)s"
TIMESTAMP_FORMAT = "%Y%m%d_%H%M%S"


class _ProjectDebugFilter(Filter):
    """DEBUG for project loggers, INFO+ for everything else."""

    def filter(self, record: LogRecord) -> bool:
        return record.name.startswith(PROJECT_PREFIXES) or record.levelno >= INFO


def timestamp() -> str:
    return datetime.now().strftime(TIMESTAMP_FORMAT)


def setup_logging(level: int = DEBUG) -> Path:
    """Configure console + file logging. Returns the log file path."""
    basicConfig(level=level, format=LOG_FORMAT)
    getLogger("asyncio").setLevel(INFO)
    getLogger("hypothesis").setLevel(WARNING)

    log_filename = LOG_PATH / f"lab_{timestamp()}.log"
    handler = FileHandler(log_filename, encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(Formatter(LOG_FORMAT))
    handler.addFilter(_ProjectDebugFilter())
    getLogger().addHandler(handler)

    getLogger(__name__).info("Logging to file: %s", log_filename)
    return log_filename


def log_metrics(logger: Logger, tag: str, metrics: Mapping[str, str]) -> None:
    """One INFO line per metric, aligned on the key."""
    width = max((len(k) for k in metrics), default=0)
    for key, value in metrics.items():
        logger.info("[%s] %-*s %s", tag, width, key, value)
