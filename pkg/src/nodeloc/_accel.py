"""Numba/Numpy backend switch for the hot numeric kernels.

Every performance-critical inner loop in this package exists twice: a
numba ``@njit`` version and a pure-numpy version. The numba path is the
default whenever numba imports; set the environment variable

    NODELOC_NUMBA=0

before importing the package to force the pure-numpy fallback (useful on
platforms without a working numba, and for A/B benchmarking — see
``benchmarks/bench_kernels.py``). Both paths implement the same math and
agree within 1e-9; the test suite pins them against brute-force oracles.
"""

import os

_env = os.environ.get("NODELOC_NUMBA", "1").strip().lower()
_want_numba = _env not in ("0", "false", "no", "off")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via NODELOC_NUMBA=0 instead
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _want_numba


def njit(func):
    """Apply ``numba.njit(cache=True)`` when the numba backend is active.

    When numba is disabled the function is returned unchanged, so the
    decorated loops run as ordinary (slow) Python. Modules that have a
    vectorized numpy fallback should branch on USE_NUMBA instead of
    relying on this decorator alone.
    """
    if USE_NUMBA:
        return numba.njit(cache=True)(func)
    return func


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
