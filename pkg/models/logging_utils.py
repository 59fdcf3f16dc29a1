import logging
import sys

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(verbosity: int = 0) -> None:
    """Configure the root logger once for CLI use.

    Args:
        verbosity: 0 for warnings only, 1 for info, 2 or more for debug
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def progress_enabled(logger: logging.Logger) -> bool:
    """Progress bars are shown only when the logger would emit INFO records"""
    return logger.isEnabledFor(logging.INFO)
