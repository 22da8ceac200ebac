"""Background experiments and threaded sweeps."""

from __future__ import annotations

import logging
import threading
import traceback
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Sequence, TypeVar

from bblab.models import ExperimentConfig

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class StatusBoard:
    """In-memory run status keyed by run id; updates merge into the previous entry."""

    def __init__(self):
        self._lock = threading.Lock()
        self._runs: dict[str, dict] = {}

    def set_status(self, run_id: str, data: dict) -> None:
        now = datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")
        with self._lock:
            existing = self._runs.get(run_id, {})
            self._runs[run_id] = {**existing, **data, "updatedAt": now}

    def get(self, run_id: str) -> dict:
        with self._lock:
            return dict(self._runs.get(run_id, {"status": "not_found"}))

    def snapshot(self) -> dict[str, dict]:
        with self._lock:
            return {k: dict(v) for k, v in self._runs.items()}


def start_experiment(
    run_id: str,
    config: ExperimentConfig,
    out_dir: Path,
    set_status: Callable[[str, dict], None],
    threads: int = 1,
) -> threading.Thread:
    """Run an experiment on a background thread and report through set_status."""
    from bblab.pipeline import run_experiment

    def job():
        set_status(run_id, {"status": "queued"})
        try:
            manifest = run_experiment(config, out_dir, set_status, run_id, threads)
            set_status(run_id, {"result": manifest.model_dump(mode="json")})
        except Exception as e:
            logger.exception("[%s] experiment crashed", run_id)
            set_status(
                run_id,
                {"status": "error", "error": str(e), "errorDetails": traceback.format_exc()[:500]},
            )

    t = threading.Thread(target=job, daemon=False, name=f"Experiment-{run_id[:16]}")
    t.start()
    logger.info("[%s] background thread started: %s", run_id, t.name)
    return t


def run_parallel(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Map fn over items with up to `threads` workers; results keep the input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="bblab") as pool:
        return list(pool.map(fn, items))
