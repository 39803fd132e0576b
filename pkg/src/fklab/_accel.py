"""Backend selection: numba when importable, pure numpy/scipy otherwise.

Set ``FKLAB_DISABLE_NUMBA=1`` to force the numpy path (checked at import).
"""

import os

DISABLED = os.environ.get("FKLAB_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if DISABLED:
        raise ImportError("numba disabled by FKLAB_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None
    HAVE_NUMBA = False


def jit(fn):
    """``njit(cache=True, nogil=True)`` when numba is active, identity otherwise."""
    if HAVE_NUMBA:
        return njit(cache=True, nogil=True)(fn)
    return fn
