"""
Logging for the NLMC simulator: console plus rotating file, per-run log files and run events
"""
import logging
import logging.handlers
from contextlib import contextmanager
from pathlib import Path

from config import Config

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
MAX_LOG_BYTES = 10 * 1024 * 1024
LOG_BACKUPS = 5
QUIET_LOGGERS = ('vtk',)

RUN_EVENT_LEVELS = {
    'RUN_STARTED': logging.INFO,
    'RUN_COMPLETED': logging.INFO,
    'RUN_SKIPPED': logging.WARNING,
    'RUN_FAILED': logging.ERROR,
}


def _log_path(log_file: str) -> Path:
    """Bare file names go to logs/"""
    path = Path(log_file)
    if path.parent == Path('.'):
        path = Path('logs') / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def setup_logging(log_level: str = None, log_file: str = None) -> logging.Logger:
    """Console at the requested level; the rotating file also keeps per-step DEBUG diagnostics"""
    log_level = (log_level or Config.LOG_LEVEL).upper()
    path = _log_path(log_file or Config.LOG_FILE)
    formatter = logging.Formatter(LOG_FORMAT)

    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler()
    console.setLevel(getattr(logging, log_level, logging.INFO))
    console.setFormatter(formatter)
    root.addHandler(console)

    rotating = logging.handlers.RotatingFileHandler(path, maxBytes=MAX_LOG_BYTES, backupCount=LOG_BACKUPS)
    rotating.setLevel(logging.DEBUG)
    rotating.setFormatter(formatter)
    root.addHandler(rotating)

    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)

    app_logger = logging.getLogger('nlmc')
    app_logger.info(f"NLMC logging configured: console {log_level}, file {path}")
    return app_logger


def get_logger(name: str = 'nlmc'):
    return logging.getLogger(name)


@contextmanager
def run_log(directory, name: str = 'run.log'):
    """Copy every record emitted inside the block to ``directory/name``"""
    path = Path(directory) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode='w')
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield path
    finally:
        root.removeHandler(handler)
        handler.close()


def log_run_event(event_type: str, run_id: str, details: dict):
    """Lifecycle events of sweep runs on the nlmc.runs logger"""
    level = RUN_EVENT_LEVELS.get(event_type, logging.INFO)
    logging.getLogger('nlmc.runs').log(level, f"[{event_type}] {run_id} - {details}")
