from __future__ import annotations

import logging
import os
import sys
from pathlib import Path
from typing import Optional

LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def run_log_path() -> Path:
    state_home = Path(os.environ.get("XDG_STATE_HOME", Path.home() / ".local" / "state"))
    log_dir = state_home / "voltcontrol"
    log_dir.mkdir(parents=True, exist_ok=True)
    return log_dir / "runs.log"


def configure_logging(verbose: bool = False, log_file: Optional[Path] = None) -> logging.Logger:
    root = logging.getLogger("voltcontrol")
    root.setLevel(logging.DEBUG)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root.addHandler(console)

    try:
        path = log_file if log_file is not None else run_log_path()
        file_handler = logging.FileHandler(path, encoding="utf-8")
    except Exception:
        # a missing log file must never break a run
        return root
    file_handler.setLevel(logging.INFO)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
    root.addHandler(file_handler)
    return root


def read_run_log() -> str:
    try:
        path = run_log_path()
        if path.exists():
            return path.read_text(encoding="utf-8")
    except Exception:
        pass
    return ""
