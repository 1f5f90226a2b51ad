from __future__ import annotations

import contextvars
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from ..config import settings

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(func: Callable[[T], R], items: Iterable[T], max_workers: int | None = None) -> list[R]:
    """Apply ``func`` to every item on a bounded pool; results keep input order.

    Each task runs in a copy of the caller's context, so workers log under the
    caller's correlation id.
    """
    work = list(items)
    workers = max(1, min(max_workers or settings.MAX_WORKERS, len(work) or 1))
    if workers == 1:
        return [func(item) for item in work]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(contextvars.copy_context().run, func, item) for item in work]
        return [future.result() for future in futures]
