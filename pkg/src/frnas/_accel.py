"""Numba switch for the hot kernels.

Every kernel in :mod:`frnas.kernels` ships a pure-numpy version and a loop
version compiled with numba. ``FRNAS_NUMBA=0`` (read at import) selects the
numpy versions; a missing numba install does the same.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

_flag = os.environ.get("FRNAS_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` in nopython mode, or return None if numba is absent."""
    if not HAVE_NUMBA:
        return None
    return numba.njit(cache=True)(fn)


def pick(jitted, fallback):
    return jitted if (USE_NUMBA and jitted is not None) else fallback


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
