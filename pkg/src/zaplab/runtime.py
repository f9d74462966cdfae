"""Process-level performance knobs for experiment runs.

Training keeps whole computation graphs alive, so the allocator sees many
interleaved multi-megabyte alloc/free cycles; glibc's default trim/mmap
thresholds turn that into page-fault churn. The GEMMs involved are small
enough that OpenBLAS threading costs more than it buys, and trials are
parallelized at the process level anyway.
"""

from __future__ import annotations

import ctypes
import os

_done = False

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_ONE_GIB = 1 << 30


def tune_process():
    """Idempotent: malloc thresholds up, BLAS down to one thread."""
    global _done
    if _done:
        return
    _done = True
    # children spawned later (sweep workers) inherit these
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("MALLOC_MMAP_THRESHOLD_", str(_ONE_GIB))
    os.environ.setdefault("MALLOC_TRIM_THRESHOLD_", str(_ONE_GIB))
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(_M_MMAP_THRESHOLD, _ONE_GIB)
        libc.mallopt(_M_TRIM_THRESHOLD, _ONE_GIB)
    except OSError:
        pass
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1, user_api="blas")
    except Exception:
        pass
