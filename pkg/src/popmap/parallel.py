"""Deterministic worker-pool helpers.

``thread_map`` preserves submission order and runs pure tasks, so results
are identical for any thread count; the pool only changes wall time. BLAS
threading is deliberately left alone.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ValidationError

THREADS_ENV = "POPMAP_THREADS"


def resolve_threads(requested: int | None = None) -> int:
    """CLI flag beats the POPMAP_THREADS env var beats cpu_count()."""
    if requested is None:
        env = os.environ.get(THREADS_ENV)
        if env is not None:
            try:
                requested = int(env)
            except ValueError:
                raise ValidationError(
                    f"{THREADS_ENV} must be an integer, got {env!r}"
                ) from None
        else:
            requested = os.cpu_count() or 1
    if requested < 1:
        raise ValidationError(f"thread count must be >= 1, got {requested}")
    return requested


def thread_map(fn, items, threads: int = 1) -> list:
    """Map fn over items, in order; results match the sequential run."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
