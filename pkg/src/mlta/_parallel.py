import os
from concurrent.futures import ProcessPoolExecutor


def pool_map(func, arglist: list[tuple], threads: int | None = None) -> list:
    """``[func(*args) for args in arglist]``, spread over processes when ``threads`` > 1.

    Results come back in input order, so reductions over them are deterministic.
    """
    threads = threads or os.cpu_count() or 1
    if threads <= 1 or len(arglist) <= 1:
        return [func(*args) for args in arglist]
    with ProcessPoolExecutor(max_workers=min(threads, len(arglist))) as pool:
        futures = [pool.submit(func, *args) for args in arglist]
        return [f.result() for f in futures]
