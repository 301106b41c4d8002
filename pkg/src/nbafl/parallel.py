import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Any, Callable, Sequence, TypeVar

logger = logging.getLogger("nbafl.parallel")

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """Apply fn to every item, possibly in threads; results come back in input order.

    The first exception raised by any task is re-raised after all tasks finish.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    results: list[Any] = [None] * len(items)
    errors: dict[int, BaseException] = {}
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(fn, item): idx for idx, item in enumerate(items)}
        for future in as_completed(futures):
            idx = futures[future]
            try:
                results[idx] = future.result()
            except Exception as e:
                logger.debug(f"Task {idx} failed: {e}")
                errors[idx] = e
    if errors:
        raise errors[min(errors)]
    return results
