"""Numba shim.

Hot index kernels are compiled with numba when it is importable and
``GACNET_NO_NUMBA`` is unset (or ``0``). Otherwise the pure-numpy paths in
:mod:`gacnet.kernels` are used.
"""
import os

_disabled = os.environ.get("GACNET_NO_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kw):
        if len(args) == 1 and callable(args[0]) and not kw:
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA
