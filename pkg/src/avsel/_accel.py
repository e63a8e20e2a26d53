"""Numba toggle.

Hot kernels are written twice: a loop form compiled with ``numba.njit`` and a
vectorized numpy form.  Set ``AVSEL_DISABLE_NUMBA=1`` to force the numpy path
(or when numba is not importable).
"""
import os

_flag = os.environ.get("AVSEL_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _flag not in ("", "0", "false", "no")

try:
    import numba as _numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV


def njit(fn):
    """Compile ``fn`` in nopython mode, or return None when numba is absent."""
    if not HAVE_NUMBA:
        return None
    return _numba.njit(cache=True, nogil=True)(fn)


def pick(numba_fn, numpy_fn):
    return numba_fn if (USE_NUMBA and numba_fn is not None) else numpy_fn
