"""Order-preserving map over independent tasks, optionally across processes."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def worker_count(requested: int | None = None) -> int:
    """Resolve a worker count; ``None`` reads SFA_THREADS (0 or unset means all cores)."""
    if requested is None:
        try:
            requested = int(os.environ.get("SFA_THREADS", "0"))
        except ValueError:
            requested = 0
    if requested <= 0:
        requested = os.cpu_count() or 1
    return max(1, requested)


def parallel_map(fn, items, workers: int | None = 1) -> list:
    items = list(items)
    workers = worker_count(workers) if workers is None else max(1, workers)
    if workers == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
