import json
import logging
import os
from pathlib import Path
from typing import Any

# Handy little helpers for the output folders every command writes into.

logger = logging.getLogger(__name__)

ENV_THREADS = "NCA_THREADS"


def ensure_dir(path: str | Path) -> Path:
    """Makes the folder (and parents) if it isn't there yet."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: str | Path, payload: Any) -> Path:
    """Stable JSON: fixed indent, insertion order kept, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def default_workers() -> int:
    """Thread count for the parallel bits: $NCA_THREADS, else the CPU count (max 8)."""
    raw = os.environ.get(ENV_THREADS)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", ENV_THREADS, raw)
    return max(1, min(8, os.cpu_count() or 1))
