"""Counter-based random streams.

Every block of trials gets its own Philox generator keyed by
``(seed, tag, block)``, so results do not depend on how blocks are spread
over workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 1 << 15


def stream(seed: int, tag: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(tag), int(block)])
    return np.random.Generator(np.random.Philox(ss))


def worker_count() -> int:
    raw = os.environ.get("ODR_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"ODR_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def blocks(n_trials: int, block: int = BLOCK):
    """``(index, size)`` pairs covering ``n_trials``."""
    out = []
    start = 0
    i = 0
    while start < n_trials:
        size = min(block, n_trials - start)
        out.append((i, size))
        start += size
        i += 1
    return out


def map_blocks(fn, items):
    """Ordered map, threaded when ODR_THREADS allows more than one worker."""
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
