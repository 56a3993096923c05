"""Deterministic fan-out helpers.

Work is split into fixed chunks whose boundaries depend only on the problem
size, never on the worker count, and partial results are combined with a
fixed pairwise tree. Results are therefore identical for any ``workers``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

_workers = 1


def set_default_workers(n: int) -> None:
    global _workers
    if n < 1:
        raise ValueError("workers must be >= 1")
    _workers = int(n)


def default_workers() -> int:
    return _workers


def chunk_bounds(n: int, chunk: int) -> list[tuple[int, int]]:
    return [(i, min(i + chunk, n)) for i in range(0, n, chunk)]


def pmap(fn: Callable[..., T], items: Sequence, workers: int | None = None) -> list[T]:
    """Order-preserving map; runs in threads when ``workers > 1``."""
    workers = _workers if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def tree_sum(parts: Sequence[np.ndarray]):
    """Pairwise reduction in a fixed order."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to reduce")
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]
