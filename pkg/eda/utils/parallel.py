from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor

from eda.constants import Runtime


def ordered_map[T, R](func: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """
    Apply `func` to every item, using up to `Runtime.threads` worker threads.

    Results come back in input order, so reductions over them do not depend on
    the number of threads.
    """
    if Runtime.threads == 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=Runtime.threads) as executor:
        return list(executor.map(func, items))
