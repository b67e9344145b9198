"""Deterministic fan-out over fixed-size row chunks."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def map_chunks(fn, X: np.ndarray, chunk: int, threads: int = 1, with_index: bool = False) -> np.ndarray:
    """Apply ``fn`` to consecutive row chunks of ``X`` and stack the results.

    Chunk boundaries depend only on ``chunk``, never on ``threads``, so the
    output is identical for every worker count.  With ``with_index`` the
    chunk number is passed as a second argument (e.g. to derive a seed).
    """
    starts = list(range(0, X.shape[0], chunk))
    if with_index:
        call = lambda i: fn(X[starts[i]:starts[i] + chunk], i)  # noqa: E731
    else:
        call = lambda i: fn(X[starts[i]:starts[i] + chunk])  # noqa: E731
    if threads <= 1 or len(starts) <= 1:
        outs = [call(i) for i in range(len(starts))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(call, range(len(starts))))
    return np.concatenate(outs, axis=0)
