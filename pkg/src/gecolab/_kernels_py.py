"""Pure numpy versions of the fixed-point kernels.

These are the reference implementations; ``_kernels.pyx`` mirrors them loop
for loop. Both backends expose the same four functions.
"""
import numpy as np


def sq_distances(X, psi):
    """Squared Euclidean distances between rows of ``X`` (n, d) and ``psi`` (A, d)."""
    d2 = np.zeros((X.shape[0], psi.shape[0]))
    for k in range(X.shape[1]):
        diff = X[:, k, None] - psi[None, :, k]
        d2 += diff * diff
    return d2


def posterior(X, psi, prior, beta):
    """Posterior cell weights ``m[i, b]`` with ``sum_b m[i, b] * prior[b] == 1``.

    Exponents are shifted by their row maximum before exponentiation.
    """
    logits = sq_distances(X, psi) * (-0.5 / beta)
    logits -= logits.max(axis=1, keepdims=True)
    E = np.exp(logits)
    c = E @ prior
    return E / c[:, None]


def centroids(M, X, previous):
    """Column-weighted means of the data; columns with zero mass keep ``previous``."""
    colmass = M.sum(axis=0)
    num = M.T @ X
    live = colmass > 0.0
    out = np.array(previous, dtype=float, copy=True)
    out[live] = num[live] / colmass[live, None]
    return out, colmass


def fixed_point_map(X, psi, prior, beta):
    """One application of posterior + reconstruction.

    The reconstruction normalises each column in the log domain, so a cell
    whose posterior mass underflows to zero still moves to its (exact)
    weighted mean. ``colmass`` reports the raw, possibly underflowed, masses.
    """
    logits = sq_distances(X, psi) * (-0.5 / beta)
    logits -= logits.max(axis=1, keepdims=True)
    E = np.exp(logits)
    c = E @ prior
    M = E / c[:, None]
    log_m = logits - np.log(c)[:, None]
    W = np.exp(log_m - log_m.max(axis=0))
    new = (W.T @ X) / W.sum(axis=0)[:, None]
    return M, new, M.sum(axis=0)
