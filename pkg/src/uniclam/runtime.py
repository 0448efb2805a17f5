"""Process-level tuning: BLAS thread cap and allocator behaviour."""

from __future__ import annotations

import ctypes
import ctypes.util
import os

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_limiter = None


def thread_cap() -> int | None:
    """Parsed UNICLAM_THREADS, or None when unset. Raises ValueError if malformed."""
    raw = os.environ.get("UNICLAM_THREADS", "").strip()
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"UNICLAM_THREADS must be >= 1, got {raw!r}")
    return n


def _tune_glibc_malloc() -> bool:
    # Training allocates and frees the same large activation buffers every
    # step. By default glibc serves them with fresh mmaps, and the resulting
    # page faults are a sizable share of step time. Keep them on the heap.
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, 1 << 30)
    ok &= mallopt(_M_TRIM_THRESHOLD, 1 << 31)
    ok &= mallopt(_M_TOP_PAD, 1 << 28)
    return bool(ok)


def configure() -> dict:
    """Apply the thread cap and allocator tuning once per process."""
    global _limiter
    info = {"threads": None, "malloc_tuned": False}
    n = thread_cap()
    if n is not None and _limiter is None:
        from threadpoolctl import threadpool_limits

        _limiter = threadpool_limits(limits=n)
        info["threads"] = n
    info["malloc_tuned"] = _tune_glibc_malloc()
    return info
