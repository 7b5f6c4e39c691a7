"""Process-level tuning for long numpy workloads."""

from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_tuned = False


def tune_allocator(threshold: int = 1 << 30) -> bool:
    """Keep freed multi-megabyte buffers in the heap instead of unmapping them.

    Training allocates and frees arrays of a few megabytes per op; with glibc's
    defaults each one is a fresh ``mmap`` whose pages fault in on first touch.
    Raising the mmap and trim thresholds lets the heap recycle them. A no-op
    returning False off glibc.
    """
    global _tuned
    if _tuned:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    ok = mallopt(_M_MMAP_THRESHOLD, threshold) == 1 and mallopt(_M_TRIM_THRESHOLD, 2 * threshold - 1) == 1
    _tuned = ok
    return ok
