"""Process-level performance knobs for the training hot loop.

The training step churns through many multi-megabyte temporaries; with
glibc's default mmap threshold every one becomes an mmap/munmap pair and
page-fault storms dominate the step time. Routing large allocations
through the heap instead (and never trimming it) roughly halves the wall
time of a training step. Both knobs are best-effort no-ops on non-glibc
platforms.
"""

from __future__ import annotations

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_MAX = -4


def tune_allocator() -> bool:
    """Keep large numpy temporaries on the heap for reuse (glibc only)."""
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_MMAP_MAX, 0)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 2**31 - 1)
        return bool(ok)
    except OSError:
        return False


def limit_blas_threads(n: int | None) -> None:
    """Cap BLAS pools; one thread is usually fastest for this package's
    small per-layer matrices."""
    if n is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass
