"""Process-level tuning for long CPU training runs."""

from __future__ import annotations

import ctypes
import logging

log = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_tuned = False


def tune_allocator() -> bool:
    """Keep freed tensor memory in the glibc heap instead of unmapping it after every step.

    Per-step mmap/munmap of activation buffers makes page faults dominate on small VMs.
    No-op (returns False) where glibc is unavailable.
    """
    global _tuned
    if _tuned:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30) == 1 and libc.mallopt(_M_MMAP_THRESHOLD, 1 << 25) == 1
    except (OSError, AttributeError):
        return False
    _tuned = ok
    log.debug("allocator tuned: %s", ok)
    return ok
