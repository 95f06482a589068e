import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "SMLMFORGE_THREADS"


def resolve_threads(threads=None):
    """Explicit value, else ``$SMLMFORGE_THREADS``, else 1."""
    if threads is None:
        threads = int(os.environ.get(ENV_THREADS, "1") or 1)
    return max(1, int(threads))


def ordered_map(fn, items, threads=None):
    """``list(map(fn, items))``, optionally on a thread pool. Output order is
    the input order regardless of scheduling."""
    threads = resolve_threads(threads)
    items = list(items)
    if threads == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
