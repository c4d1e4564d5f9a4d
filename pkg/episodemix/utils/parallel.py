"""Deterministic chunked map-reduce and per-unit random streams.

Work is always cut into fixed-size chunks and reduced in chunk order, so the
thread count changes wall time only, never the floating-point result.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, Tuple, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def chunked(items: Sequence[T], chunk_size: int) -> List[Tuple[int, Sequence[T]]]:
    """(start index, slice) pairs covering ``items`` in order."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be at least 1")
    return [(start, items[start:start + chunk_size]) for start in range(0, len(items), chunk_size)]


def map_chunks(fn: Callable[[int, Sequence[T]], R], items: Sequence[T], chunk_size: int,
               threads: int = 1) -> List[R]:
    """Apply ``fn(start, chunk)`` to every chunk; results come back in chunk order."""
    chunks = chunked(items, chunk_size)
    if threads <= 1 or len(chunks) <= 1:
        return [fn(start, chunk) for start, chunk in chunks]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(lambda pair: fn(*pair), chunks))


def unit_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for one unit of work, e.g. ``unit_rng(seed, restart, episode)``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))
