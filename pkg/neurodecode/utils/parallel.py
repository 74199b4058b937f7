"""Order-preserving data-parallel map capped by the thread setting."""

from __future__ import annotations

from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

from neurodecode.config import settings

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """Apply ``fn`` to every item, returning results in input order.

    Each call must be independent of the others (own RNG stream, no shared
    mutable state) so that the result matches a sequential loop bitwise.
    """
    workers = settings.threads if threads is None else threads
    values = list(items)
    if workers <= 1 or len(values) <= 1:
        return [fn(value) for value in values]
    with ThreadPoolExecutor(max_workers=min(workers, len(values))) as pool:
        return list(pool.map(fn, values))
