"""Optional numba acceleration.

Hot kernels are written in the numba-compatible subset of Python and decorated
with :func:`njit`.  Setting ``GERT_DISABLE_NUMBA=1`` (or running without numba
installed) turns the decorator into a no-op, and callers that have a
vectorized numpy twin dispatch to it instead.
"""

import os

_flag = os.environ.get("GERT_DISABLE_NUMBA", "").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised by the fallback benchmark
    _numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when acceleration is enabled, identity otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def use_numba() -> bool:
    return HAVE_NUMBA
