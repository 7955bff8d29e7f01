"""Backend selection for the hot kernels.

Set ``TMECONTROL_NUMBA=0`` in the environment to force the pure-numpy path.
The flag is read once at import time.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("TMECONTROL_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def njit(func):
    """Compile ``func`` with numba when available, else return it unchanged."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
