import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(
    func: Callable[[T], R],
    items: Iterable[T],
    workers: int = 1,
    logger: Optional[logging.Logger] = None,
) -> List[R]:
    """
    Apply ``func`` to every item, optionally on a bounded thread pool.

    Args:
        func: Callable applied to each item; must not share mutable state
        items: Work items
        workers: Pool size; 1 runs sequentially in the calling thread
        logger: Optional logger for debug and error information

    Returns:
        Results in the order of ``items``, whatever the completion order
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    if logger:
        logger.debug(f"Running {len(items)} tasks on {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, item) for item in items]
        results = []
        for future in futures:
            try:
                results.append(future.result())
            except Exception:
                if logger:
                    logger.error(traceback.format_exc())
                for pending in futures:
                    pending.cancel()
                raise
        return results
