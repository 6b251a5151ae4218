"""Kernel backend selection.

The Cython extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``STVEM_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import fallback

_force_py = os.environ.get("STVEM_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_py:
        raise ImportError
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def vandermonde(pts, exps):
    """Rows: points, columns: monomials ``prod_v pts[:, v] ** exps[:, v]``."""
    if _compiled is None:
        return fallback.vandermonde(pts, exps)
    return _compiled.vandermonde(
        np.ascontiguousarray(pts, dtype=np.float64), np.ascontiguousarray(exps, dtype=np.int_)
    )


def vandermonde_deriv(pts, exps, var):
    """Derivative of each monomial with respect to variable ``var`` (unscaled)."""
    if _compiled is None:
        return fallback.vandermonde_deriv(pts, exps, var)
    return _compiled.vandermonde_deriv(
        np.ascontiguousarray(pts, dtype=np.float64), np.ascontiguousarray(exps, dtype=np.int_), int(var)
    )
