"""Numba switch.

Set ``DRAWDOWN_OPT_NUMBA=0`` before import to run every kernel on the pure
numpy/scipy path. Both paths are kept numerically interchangeable.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("DRAWDOWN_OPT_NUMBA", "1") != "0"


def njit(func):
    """``numba.njit(cache=True, nogil=True)`` when enabled, identity otherwise."""
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func
