"""Batch-axis parallelism for the kernels, capped by SSA_THREADS."""
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, TypeVar

T = TypeVar("T")

_threads: Optional[int] = None


def set_threads(count: int):
    global _threads
    _threads = max(1, int(count))


def get_threads() -> int:
    if _threads is not None:
        return _threads
    try:
        return max(1, int(os.getenv("SSA_THREADS", "1")))
    except ValueError:
        return 1


def batch_slices(n: int, parts: int) -> List[slice]:
    parts = max(1, min(parts, n))
    bounds = [round(k * n / parts) for k in range(parts + 1)]
    return [slice(bounds[k], bounds[k + 1]) for k in range(parts)]


def map_batch(fn: Callable[[slice], T], n: int) -> List[T]:
    """Run fn over contiguous batch chunks; results come back in batch order."""
    threads = get_threads()
    if threads <= 1 or n < 2:
        return [fn(slice(0, n))]
    slices = batch_slices(n, threads)
    with ThreadPoolExecutor(max_workers=len(slices)) as pool:
        return list(pool.map(fn, slices))
