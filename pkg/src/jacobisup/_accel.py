"""Optional numba acceleration.

Hot kernels are written once as plain loops and decorated with :func:`njit`.
When numba is missing, or when ``JACOBISUP_NUMBA=0`` is set in the
environment, :func:`njit` is the identity and callers switch to the
vectorised numpy implementations that sit next to each kernel.
"""
from __future__ import annotations

import os

_FLAG = os.environ.get("JACOBISUP_NUMBA", "1").strip().lower()

try:
    if _FLAG in ("0", "false", "no", "off"):
        raise ImportError("numba disabled by JACOBISUP_NUMBA")
    import numba
    from numba import njit as _numba_njit
    from numba import prange

    # the bundled TBB is too old for numba; the portable layer keeps results identical
    numba.config.THREADING_LAYER = "workqueue"

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False
    _numba_njit = None

    def prange(*args):
        return range(*args)


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True`` when enabled, otherwise a no-op."""
    if NUMBA_AVAILABLE:
        kwargs.setdefault("cache", True)
        return _numba_njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def decorator(func):
        return func

    return decorator


def backend_name() -> str:
    return "numba" if NUMBA_AVAILABLE else "numpy"
