"""Numba switch.

Hot kernels are written once as plain loops and compiled with ``numba.njit``
when numba is importable and ``GEO_EXEC_NUMBA`` is not set to ``0``. With the
flag off every kernel falls back to its vectorised numpy twin.
"""

import os

_FLAG = os.environ.get("GEO_EXEC_NUMBA", "1").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and _FLAG not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, otherwise the identity decorator."""
    if USE_NUMBA:
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend():
    return "numba" if USE_NUMBA else "numpy"
