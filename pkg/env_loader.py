"""Environment defaults for the bias-correction toolkit.

Reads ``RESA_*`` settings from a ``.env`` file next to the modules (or the
file named by ``RESA_ENV_FILE``). Variables already set in the process
environment win over the file.
"""

import logging
import os
from pathlib import Path
from typing import Dict, Optional, Union

logger = logging.getLogger(__name__)

PREFIX = "RESA_"


def parse_env_lines(text: str) -> Dict[str, str]:
    """``KEY=value`` pairs; comments, blanks and non-RESA keys are skipped, quotes stripped"""
    values = {}
    for raw in text.splitlines():
        line = raw.strip()
        if line.startswith("export "):
            line = line[len("export "):].lstrip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key.startswith(PREFIX):
            continue
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        values[key] = value
    return values


def load_env_file(env_path: Optional[Union[str, Path]] = None) -> Dict[str, str]:
    """Apply a ``.env`` file to ``os.environ``; returns the keys it actually set"""
    if env_path is None:
        env_path = os.environ.get("RESA_ENV_FILE") or Path(__file__).resolve().parent / ".env"
    path = Path(env_path)
    if not path.is_file():
        return {}

    applied = {}
    for key, value in parse_env_lines(path.read_text(encoding="utf-8")).items():
        if key not in os.environ:
            os.environ[key] = value
            applied[key] = value
    logger.debug("loaded %d settings from %s", len(applied), path)
    return applied


load_env_file()
