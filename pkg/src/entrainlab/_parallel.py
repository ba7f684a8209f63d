"""Thread fan-out for independent sweeps.

The worker count comes from ``ENTRAINLAB_THREADS`` (default 1). Results are
always returned in submission order so reductions stay deterministic.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "ENTRAINLAB_THREADS"


def thread_count() -> int:
    raw = os.environ.get(ENV_VAR, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    return max(n, 1)


def ordered_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
