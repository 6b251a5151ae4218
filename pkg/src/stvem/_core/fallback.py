"""Pure numpy versions of the compiled kernels."""
import numpy as np


def vandermonde(pts, exps):
    pts = np.asarray(pts, dtype=float)
    exps = np.asarray(exps)
    return np.prod(pts[:, None, :] ** exps[None, :, :], axis=2)


def vandermonde_deriv(pts, exps, var):
    pts = np.asarray(pts, dtype=float)
    exps = np.asarray(exps)
    lowered = exps.copy()
    lowered[:, var] = np.maximum(lowered[:, var] - 1, 0)
    return exps[:, var] * np.prod(pts[:, None, :] ** lowered[None, :, :], axis=2)
