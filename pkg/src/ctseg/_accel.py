"""Numba switch.

Hot kernels are compiled with numba when it is importable and the
``CTSEG_DISABLE_NUMBA`` environment variable is not set to a truthy value.
Otherwise the pure-numpy implementations are used.  Both paths produce the
same numbers (bitwise for integer outputs and gathers; floating reductions may
differ in the last ulp, see ``tests/test_kernels.py``).
"""

import os

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator


def _env_disabled():
    return os.environ.get("CTSEG_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


_enabled = HAVE_NUMBA and not _env_disabled()


def njit(*args, **kwargs):
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return _njit(*args, **kwargs)


def use_numba():
    return _enabled


def set_numba(enabled):
    """Select the kernel backend at runtime; returns the previous setting."""
    global _enabled
    previous = _enabled
    _enabled = bool(enabled) and HAVE_NUMBA
    return previous
