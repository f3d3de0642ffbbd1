"""Backend selection for the hot kernels.

Set ``FLOWSMP_NUMBA=0`` before import to force the pure-numpy kernels.
When numba is not installed the numpy kernels are used regardless.
"""

import os

_flag = os.environ.get("FLOWSMP_NUMBA", "1").strip().lower()
_requested = _flag not in ("0", "false", "no", "off")

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

USE_NUMBA = _requested and HAVE_NUMBA


def njit(*args, **kwargs):
    """``numba.njit`` with cache/nogil defaults, or a no-op without numba."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    import numba

    return numba.njit(*args, **kwargs)
