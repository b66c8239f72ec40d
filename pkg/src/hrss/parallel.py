"""Worker-count control for the data-parallel kernels.

``HRSS_THREADS`` caps the pool size.  Kernels only split along axes whose
slices are computed independently, so results do not depend on the setting.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np


def workers() -> int:
    try:
        return max(1, int(os.environ.get("HRSS_THREADS", "1")))
    except ValueError:
        return 1


def split_apply(fn: Callable[[slice], None], extent: int) -> None:
    """Run ``fn(slice)`` over contiguous blocks of ``range(extent)``."""
    n = min(workers(), extent)
    if n <= 1:
        fn(slice(0, extent))
        return
    bounds = np.linspace(0, extent, n + 1).astype(int)
    slices = [slice(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    with ThreadPoolExecutor(max_workers=n) as pool:
        for fut in [pool.submit(fn, s) for s in slices]:
            fut.result()
