"""Order-preserving parallel map over replicate indices."""

from __future__ import annotations

import multiprocessing as mp
import os
from typing import Callable, Optional, Sequence

_TASK: Optional[Callable] = None


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


def _call(i):
    return _TASK(i)


def pmap(task: Callable, items: Sequence, workers: Optional[int] = None) -> list:
    """``[task(x) for x in items]``, run on ``workers`` forked processes.

    The task may be a closure: it is inherited through ``fork`` rather than
    pickled.  Results come back in input order, so aggregation does not
    depend on completion order.  Falls back to a serial loop for one worker
    or where ``fork`` is unavailable.
    """
    global _TASK
    items = list(items)
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ValueError("workers must be at least 1")
    if workers == 1 or len(items) < 2 or "fork" not in mp.get_all_start_methods():
        return [task(x) for x in items]
    _TASK = task
    try:
        with mp.get_context("fork").Pool(min(workers, len(items))) as pool:
            return pool.map(_call, items, chunksize=max(1, len(items) // (4 * workers)))
    finally:
        _TASK = None
