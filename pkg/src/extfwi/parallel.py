"""Ordered parallel map over independent per-frequency work."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_threads = 1


def set_threads(n: int | None) -> int:
    global _threads
    _threads = max(1, int(n)) if n else (os.cpu_count() or 1)
    return _threads


def get_threads() -> int:
    return _threads


def ordered_map(fn, items):
    """``[fn(x) for x in items]``, possibly threaded; result order is fixed.

    LAPACK releases the GIL, so threads overlap the banded solves.  Callers
    reduce the returned list serially, which keeps sums bit-reproducible.
    """
    items = list(items)
    if _threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(_threads, len(items))) as pool:
        return list(pool.map(fn, items))
