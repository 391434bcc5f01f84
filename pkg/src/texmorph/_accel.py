"""Optional numba acceleration.

Set ``TEXMORPH_NUMBA=0`` to force the pure-numpy kernels even when numba is
installed. The flag is read once at import time.
"""
import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("TEXMORPH_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def deco(fn):
        return fn

    return deco


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
