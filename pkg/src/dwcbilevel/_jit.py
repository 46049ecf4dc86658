"""Compilation switch for the hot kernels.

Kernels are written in a numba-compatible subset of Python.  They are
compiled with ``numba.njit`` unless numba is missing or the environment
variable ``DWCBILEVEL_NUMBA`` is set to ``0``, in which case the same
functions run as plain Python over numpy arrays.
"""
import os

_flag = os.environ.get("DWCBILEVEL_NUMBA", "1").strip().lower()
_requested = _flag not in ("0", "false", "no", "off")

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _requested


def jit(fn):
    """Compile ``fn`` in nopython mode when the numba backend is active."""
    if USE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


def backend():
    return "numba" if USE_NUMBA else "numpy"
