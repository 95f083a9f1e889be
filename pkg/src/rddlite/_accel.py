"""Backend selection for the hot kernels.

Set ``RDDLITE_DISABLE_NUMBA=1`` to force the pure-numpy code paths.  If numba
cannot be imported the numpy paths are used as well.
"""
import os
import warnings

_FLAG = os.environ.get("RDDLITE_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _FLAG in ("1", "true", "yes", "on")

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    _njit = None
    if not DISABLED_BY_ENV:
        warnings.warn("numba not importable, using numpy kernels")

USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
