import logging
import os
from typing import List, Optional

from dotenv import load_dotenv

load_dotenv()

# ============================================================
# 1. ENVIRONMENT OVERRIDES
# ============================================================

OUTPUT_DIR_ENV = "POWERTRAIN_LAB_OUTPUT_DIR"
WORKERS_ENV = "POWERTRAIN_LAB_WORKERS"
LOG_LEVEL_ENV = "POWERTRAIN_LAB_LOG_LEVEL"
RUN_SLOW_ENV = "POWERTRAIN_LAB_RUN_SLOW"

# Tried in order when no --config is given
CONFIG_CANDIDATES = [
    "lab_config.json",
    os.path.join("configs", "default.json"),
]

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"


def output_dir_override() -> Optional[str]:
    value = os.getenv(OUTPUT_DIR_ENV, "").strip()
    return value or None


def workers_override() -> Optional[int]:
    value = os.getenv(WORKERS_ENV, "").strip()
    if not value:
        return None
    try:
        return max(1, int(value))
    except ValueError:
        logging.getLogger(__name__).warning(
            "ignoring %s=%r (not an integer)", WORKERS_ENV, value
        )
        return None


def run_slow_tests() -> bool:
    return os.getenv(RUN_SLOW_ENV, "0").strip().lower() in ("1", "true", "yes")


def find_default_config(candidates: Optional[List[str]] = None) -> Optional[str]:
    """Return the first existing config path, or None."""
    for path in candidates or CONFIG_CANDIDATES:
        if os.path.exists(path):
            return path
    return None


# ============================================================
# 2. LOGGING
# ============================================================

def setup_logging(level: Optional[str] = None) -> None:
    """
    Configure the root logger once for CLI runs.

    The level comes from the argument, then POWERTRAIN_LAB_LOG_LEVEL, then INFO.
    """
    name = (level or os.getenv(LOG_LEVEL_ENV, "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format=LOG_FORMAT,
        force=True,
    )
