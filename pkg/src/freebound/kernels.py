"""Selects the compiled kernels when available, the numpy versions otherwise.

Set ``FREEBOUND_PURE_PYTHON=1`` to force the fallback.
"""
import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)

_force_pure = os.environ.get("FREEBOUND_PURE_PYTHON", "") not in ("", "0")
try:
    if _force_pure:
        raise ImportError("pure python requested")
    from . import _ckernels as _impl
    COMPILED = True
except ImportError:
    _impl = _pykernels
    COMPILED = False

BACKEND = "cython" if COMPILED else "python"


def scatter_hat_stencil(coef, left, h0, h1, sidx, sw, nt, M):
    import numpy as np
    return _impl.scatter_hat_stencil(np.ascontiguousarray(coef, dtype=float), np.ascontiguousarray(left, dtype=np.intp),
                                     np.ascontiguousarray(h0, dtype=float), np.ascontiguousarray(h1, dtype=float),
                                     np.ascontiguousarray(sidx, dtype=np.intp), np.ascontiguousarray(sw, dtype=float),
                                     int(nt), int(M))


def crr_layers(K, r, sigma, T, N, width):
    return _impl.crr_layers(float(K), float(r), float(sigma), float(T), int(N), int(width))


def psor_1d(u, rhs, obstacle, lower, diag, upper, omega, tol, max_sweeps):
    return _impl.psor_1d(u, rhs, obstacle, lower, diag, upper, float(omega), float(tol), int(max_sweeps))


def psor_2d(u, rhs, obstacle, stencil, omega, tol, max_sweeps):
    return _impl.psor_2d(u, rhs, obstacle, stencil, float(omega), float(tol), int(max_sweeps))
