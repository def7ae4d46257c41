"""Optional numba acceleration.

Set ``PCLGCP_DISABLE_NUMBA=1`` to force the pure-numpy code paths.
"""

import os

_FLAG = "PCLGCP_DISABLE_NUMBA"

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get(_FLAG, "").strip().lower() not in {"1", "true", "yes", "on"}


def njit(fn):
    """Compile ``fn`` in nopython mode, or return ``None`` when numba is unavailable."""
    if not HAVE_NUMBA:
        return None
    return _numba.njit(cache=True, nogil=True)(fn)
