import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path

from src.core.config import settings

LOG_FORMAT = "%(levelname)s [%(asctime)s] [%(name)s:%(funcName)s:%(lineno)d] : %(message)s "
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def Logger(name: str = settings.PROJECT_NAME) -> logging.Logger:
    log = logging.getLogger(name)
    log.setLevel(logging.DEBUG if settings.ENV == "development" else logging.INFO)
    log.propagate = False

    if log.hasHandlers():
        log.handlers.clear()

    formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    log.addHandler(console_handler)

    if settings.LOG_TO_FILE:
        log_dir = Path(settings.LOG_DIR)
        log_dir.mkdir(parents=True, exist_ok=True)

        file_handler = RotatingFileHandler(
            filename=log_dir / settings.LOG_FILE,
            maxBytes=settings.LOG_FILE_MAX_BYTES,
            backupCount=settings.LOG_FILE_BACKUP_COUNT,
        )
        file_handler.setFormatter(formatter)
        log.addHandler(file_handler)

    return log


def _package_loggers(prefix: str) -> list[logging.Logger]:
    return [
        log
        for name, log in list(logging.root.manager.loggerDict.items())
        if name.startswith(prefix) and isinstance(log, logging.Logger)
    ]


def attach_run_log(path: Path, prefix: str = "src") -> logging.Handler:
    """Mirror every package logger into a run directory; undo with `detach_run_log`."""
    handler = logging.FileHandler(path)
    handler.setFormatter(logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
    for log in _package_loggers(prefix):
        log.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler, prefix: str = "src") -> None:
    for log in _package_loggers(prefix):
        log.removeHandler(handler)
    handler.close()


logger = Logger()
