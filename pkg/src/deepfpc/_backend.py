"""Select the compiled kernels when available, else the numpy fallback.

Set ``DEEPFPC_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

if os.environ.get("DEEPFPC_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _impl
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        from . import _pykernels as _impl
        BACKEND = "python"


def fpc_iterations(phi, y, x, tau, nu, iters, impl=None):
    """In-place FPC updates on the float64 contiguous vector ``x``."""
    impl = impl or _impl
    return int(impl.fpc_iterations(np.ascontiguousarray(phi, dtype=float),
                                   np.ascontiguousarray(y, dtype=float),
                                   x, float(tau), float(nu), int(iters)))


def fpc_iterations_rows(phi, ys, xs, tau, nu, iters, impl=None):
    impl = impl or _impl
    return impl.fpc_iterations_rows(np.ascontiguousarray(phi, dtype=float),
                                    np.ascontiguousarray(ys, dtype=float),
                                    xs, float(tau), float(nu), int(iters))
