"""Hot loops with numba acceleration and a pure-numpy-compatible fallback.

The only kernel is the sequential dead-time acceptance scan: given the
sorted slot indices of candidate clicks on one detector, keep a click only
if the detector is live, then block the next `blocked` slots. The scan is
inherently serial (each decision depends on the previous accepted click),
which is exactly the shape that resists vectorization and benefits from
compilation.

Set QKDSIM_PURE_NUMPY=1 to force the interpreted fallback; the two paths
execute the same function body and produce bit-identical output (the kernel
draws no randomness).
"""
from __future__ import annotations

import os

import numpy as np

__all__ = ["HAVE_NUMBA", "USE_NUMBA", "dead_time_scan"]

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:          # pragma: no cover - exercised via env flag instead
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("QKDSIM_PURE_NUMPY", "") not in ("1", "true")


def _dead_time_scan_py(slots, blocked, start_block):
    """Accept mask over sorted candidate slots; returns next blocked-until.

    slots: int64 sorted ascending, candidate click slot indices
    blocked: int64, number of slots a click disables after itself
    start_block: int64, first slot index still blocked by an earlier chunk
    """
    n = slots.shape[0]
    accept = np.zeros(n, dtype=np.bool_)
    blocked_until = start_block
    for i in range(n):
        s = slots[i]
        if s >= blocked_until:
            accept[i] = True
            blocked_until = s + blocked + 1
    return accept, blocked_until


if USE_NUMBA:
    dead_time_scan = njit(cache=True)(_dead_time_scan_py)
else:
    dead_time_scan = _dead_time_scan_py
