"""Small shared helpers: worker-count resolution, ordered parallel map, digests."""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

THREADS_ENV = "VOXHARM_THREADS"

_T = TypeVar("_T")
_R = TypeVar("_R")


def resolve_threads(requested: int | str | None = None,
                    fallback: int | str | None = None) -> int:
    """Pick a worker count: explicit request, then $VOXHARM_THREADS, then fallback, then 1."""
    for candidate in (requested, os.environ.get(THREADS_ENV), fallback):
        if candidate is None or candidate == "":
            continue
        n = int(candidate)
        if n < 1:
            raise ValueError(f"thread count must be >= 1, got {n}")
        return n
    return 1


def thread_map(fn: Callable[[_T], _R], items: Iterable[_T], threads: int = 1) -> list[_R]:
    """Map ``fn`` over ``items``; the result list preserves input order.

    Callers that need determinism independent of ``threads`` must make all
    cross-item reductions order-independent (exact sums, integer merges).
    """
    seq = list(items)
    if threads <= 1 or len(seq) <= 1:
        return [fn(x) for x in seq]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, seq))


def sha256_hex(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()
