"""Counter-based random streams and path batching.

Every Monte-Carlo path owns a Philox stream keyed by ``(seed, path index)``,
so a path's Brownian increments never depend on how paths are grouped into
batches or spread over threads.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .settings import DEFAULT_BATCH_SIZE

_MASK64 = (1 << 64) - 1


def path_generator(seed, path_index):
    key = np.array([int(seed) & _MASK64, int(path_index) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(seed, path_indices, n_steps, d, dt):
    """Return increments of shape (paths, n_steps, d) scaled by sqrt(dt)."""
    path_indices = np.atleast_1d(path_indices)
    out = np.empty((path_indices.size, int(n_steps), int(d)))
    scale = np.sqrt(dt)
    for row, p in enumerate(path_indices):
        out[row] = path_generator(seed, p).standard_normal((int(n_steps), int(d))) * scale
    return out


def split_batches(n, batch_size):
    n = int(n)
    batch_size = int(max(1, batch_size))
    bounds = []
    start = 0
    while start < n:
        stop = min(n, start + batch_size)
        bounds.append((start, stop))
        start = stop
    return bounds


# This function runs fn(start, stop) over path batches.
# Results come back in path order whatever the thread count.
def run_batched(fn, n_paths, threads=1, batch_size=DEFAULT_BATCH_SIZE):
    bounds = split_batches(n_paths, batch_size)
    if threads <= 1 or len(bounds) == 1:
        return [fn(start, stop) for start, stop in bounds]
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        futures = [pool.submit(fn, start, stop) for start, stop in bounds]
        return [f.result() for f in futures]
