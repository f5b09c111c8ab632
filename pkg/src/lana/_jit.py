"""Numba switch.

Hot kernels are compiled with numba when it is importable and the
``LANA_DISABLE_JIT`` environment variable is unset or ``0``. Otherwise the
public kernels in :mod:`lana.kernels` resolve to their pure-numpy twins.
Both variants stay importable so they can be benchmarked side by side.
"""

import os

_flag = os.environ.get("LANA_DISABLE_JIT", "0").strip().lower()
JIT_REQUESTED = _flag in ("", "0", "false", "no")

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover
    numba = None
    NUMBA_AVAILABLE = False

USE_JIT = JIT_REQUESTED and NUMBA_AVAILABLE


def njit(fn):
    """Compile ``fn`` in nopython mode if numba exists; else return it unchanged."""
    if not NUMBA_AVAILABLE:  # pragma: no cover
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)
