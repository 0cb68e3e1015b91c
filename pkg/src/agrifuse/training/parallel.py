"""Independent-task fan-out for sweeps and cross-validation folds."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_count(default: int = 1) -> int:
    """Workers allowed by ``AGRIFUSE_THREADS`` (default 1)."""
    raw = os.environ.get("AGRIFUSE_THREADS", "")
    try:
        n = int(raw) if raw else default
    except ValueError:
        return default
    return max(1, n)


def run_tasks(
    fn: Callable[[T], R],
    tasks: Sequence[T],
    workers: int = 1,
    progress: Optional[Callable[[str], None]] = None,
    label: str = "task",
) -> List[R]:
    """Results in task order; every task must seed its own randomness."""
    total = len(tasks)
    if workers <= 1 or total <= 1:
        out = []
        for i, t in enumerate(tasks):
            out.append(fn(t))
            if progress:
                progress(f"{label} {i + 1}/{total} done")
        return out
    with ProcessPoolExecutor(max_workers=min(workers, total)) as pool:
        out = []
        for i, r in enumerate(pool.map(fn, tasks)):
            out.append(r)
            if progress:
                progress(f"{label} {i + 1}/{total} done")
        return out
