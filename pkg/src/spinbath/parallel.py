"""Deterministic parallel map: results always in input order."""

import os
from concurrent.futures import ProcessPoolExecutor


def default_workers():
    return os.cpu_count() or 1


def ordered_map(func, items, workers=1):
    """Map preserving input order; a worker pool is used only when
    requested, so single-threaded runs stay dependency-free."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
