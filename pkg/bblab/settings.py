import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Worker threads for sweeps when --threads is not given
THREADS = int(os.getenv("BBLAB_THREADS", "1"))

# Root directory for experiment outputs
OUTPUT_DIR = Path(os.getenv("BBLAB_OUTPUT_DIR", "runs"))

LOG_LEVEL = os.getenv("BBLAB_LOG_LEVEL", "INFO")


def resolve_threads(flag: int | None = None) -> int:
    """Thread count: explicit flag first, then BBLAB_THREADS (re-read), then 1."""
    if flag is not None:
        return max(1, int(flag))
    raw = os.getenv("BBLAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return max(1, THREADS)


def resolve_output_dir(flag: str | None = None, configured: str | None = None) -> Path:
    if flag:
        return Path(flag)
    if configured:
        return Path(configured)
    return Path(os.getenv("BBLAB_OUTPUT_DIR", str(OUTPUT_DIR)))
