"""Backend selection for the fixed-point kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``GECOLAB_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("GECOLAB_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def sq_distances(X, psi):
    return _impl.sq_distances(_c(X), _c(psi))


def posterior(X, psi, prior, beta):
    return _impl.posterior(_c(X), _c(psi), _c(prior), float(beta))


def centroids(M, X, previous):
    return _impl.centroids(_c(M), _c(X), previous)


def fixed_point_map(X, psi, prior, beta):
    return _impl.fixed_point_map(_c(X), _c(psi), _c(prior), float(beta))
