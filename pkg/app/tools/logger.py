# app/tools/logger.py
import os
import sys
from datetime import datetime
from typing import Optional

LEVELS = {"DEBUG": 0, "INFO": 1, "WARNING": 2, "ERROR": 3}
LOG_LEVEL_ENV = "MMTOC_LOG_LEVEL"


def should_log(level: str) -> bool:
    """Check if we should log at the given level based on MMTOC_LOG_LEVEL."""
    current = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    return LEVELS.get(level, 1) >= LEVELS.get(current, 1)


def log_stderr(level: str, msg: str) -> None:
    """Library-side logging for pipeline modules that have no RunLogger."""
    if should_log(level):
        print(f"{level}: {msg}", file=sys.stderr)


class RunLogger:
    """
    Simple run logger:
    - prints to stdout (filtered by MMTOC_LOG_LEVEL)
    - optionally appends every line to a logfile (e.g., runs/<run>/run.log)
    """

    def __init__(self, run_id: str, logfile_path: Optional[str] = None):
        self.run_id = run_id
        self.logfile_path = logfile_path

        if self.logfile_path:
            os.makedirs(os.path.dirname(self.logfile_path), exist_ok=True)
            # Touch early so it exists even if we crash later
            with open(self.logfile_path, "a", encoding="utf-8") as f:
                f.write("")

    def log(self, msg: str, level: str = "INFO") -> None:
        ts = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        line = f"[{ts}] {msg}" if level == "INFO" else f"[{ts}] {level}: {msg}"
        if should_log(level):
            print(line)
        if self.logfile_path:
            with open(self.logfile_path, "a", encoding="utf-8") as f:
                f.write(line + "\n")

    def debug(self, msg: str) -> None:
        self.log(msg, "DEBUG")

    def warning(self, msg: str) -> None:
        self.log(msg, "WARNING")

    def error(self, msg: str) -> None:
        self.log(msg, "ERROR")


def make_run_logger(run_id: str, outdir: str | None = None) -> RunLogger:
    logfile_path = os.path.join(outdir, "run.log") if outdir else None
    return RunLogger(run_id=run_id, logfile_path=logfile_path)
