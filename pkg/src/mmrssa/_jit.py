"""Switch between numba-compiled kernels and their plain Python/numpy fallback.

Set ``MMRSSA_DISABLE_JIT=1`` before import to run every kernel uncompiled.
"""
import os

DISABLED = os.environ.get("MMRSSA_DISABLE_JIT", "0").lower() in ("1", "true", "yes")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAS_NUMBA = numba is not None and not DISABLED


def njit(*args, **kwargs):
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def deco(fn):
        return fn

    return deco
