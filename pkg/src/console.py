from __future__ import annotations
import sys
import logging
import traceback
import threading
from typing import Final, TextIO

log: Final[logging.Logger] = logging.getLogger(__name__)

# -------------------------------------------------------------
#  color-coded log output on stderr, data output on stdout

class ConsoleStreamHandler(logging.StreamHandler):
    def __init__(self, stream: TextIO | None = None):
        logging.StreamHandler.__init__(self, stream or sys.stderr)
        self.msg_colors = {
            logging.NOTSET: '\033[38;5;45m', # blue
            logging.DEBUG: '\033[38;5;45m', # blue
            logging.INFO: '\033[38;5;247m', # gray
            logging.WARNING: '\033[38;5;227m', # yellow
            logging.ERROR: '\033[38;5;160m', # red
            logging.CRITICAL: '\033[38;5;196m', # bright red
        }
        self.reset_color = '\033[39m' # 39m = reset foreground color only

    def emit(self, record: logging.LogRecord) -> None:
        try:
            text = self.format(record).rstrip()
            if Console.colors_enabled(self.stream):
                color = self.msg_colors.get(record.levelno, '')
                text = f"{color}{text}{self.reset_color}"
            Console.writeln_to(self.stream, text)
        except Exception:
            Console.writeln_to(self.stream, f"Unhandled exception! {traceback.format_exc().rstrip()}")

def setup_logging(level: int | str = logging.INFO):
    """ Route the log target in this file through the color-coded stderr handler """
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO
    handler = ConsoleStreamHandler()
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(
        "%(asctime)s [%(levelname)s] %(module)s - %(funcName)s: %(message)s",
        datefmt='%Y-%m-%d %H:%M:%S'))
    log.setLevel(level)
    log.propagate = False
    for old in list(log.handlers):
        log.removeHandler(old)
    log.addHandler(handler)


class Console:
    """ Locked writers for stdout/stderr. Training sweeps can run in a thread pool,
    so every write goes through `_LOCK` to keep lines from interleaving.
    """
    _LOCK = threading.RLock()
    enable_colors = True

    @staticmethod
    def colors_enabled(stream: TextIO) -> bool:
        if not Console.enable_colors:
            return False
        isatty = getattr(stream, 'isatty', None)
        return bool(isatty and isatty())

    @staticmethod
    def writeln_to(stream: TextIO, text: str):
        with Console._LOCK:
            stream.write(text + '\n')
            stream.flush()

    @staticmethod
    def writeln(text: str):
        """Write a data line to stdout"""
        Console.writeln_to(sys.stdout, text)
