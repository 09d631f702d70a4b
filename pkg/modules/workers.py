import asyncio
import logging
from typing import Callable, Iterable, List, Optional, Sequence, TypeVar

import numpy as np

import config

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


async def _gather_ordered(fn: Callable[[T], R], items: Sequence[T], workers: int) -> List[R]:
    semaphore = asyncio.Semaphore(workers)

    async def run(item: T) -> R:
        async with semaphore:
            return await asyncio.to_thread(fn, item)

    # gather keeps submission order, so the merge is independent of scheduling
    return await asyncio.gather(*(run(item) for item in items))


def map_ordered(fn: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """Apply `fn` to every item on up to `workers` threads; results come back in input order."""
    workers = workers or config.WORKERS
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    logger.debug(f"Fanning out {len(items)} work items over {workers} workers")
    return asyncio.run(_gather_ordered(fn, items, workers))


def pairwise_sum(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Fold partial sums with a fixed binary tree over their original order."""
    if not parts:
        raise ValueError("pairwise_sum needs at least one part")
    level = list(parts)
    while len(level) > 1:
        folded = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            folded.append(level[-1])
        level = folded
    return level[0]


def chunk_bounds(total: int, chunk: Optional[int] = None) -> List[tuple]:
    chunk = chunk or config.CHUNK_SIZE
    return [(start, min(start + chunk, total)) for start in range(0, total, chunk)]
