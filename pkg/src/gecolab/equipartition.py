"""Prior occupancies of Hamiltonian level sets.

Given energies ``H[i, a]`` of datum ``i`` on level set ``a`` and temperature
``beta``, the occupancies ``gamma`` solve

    sum_i e^{-H_ia/beta} / sum_b e^{-H_ib/beta} gamma_b = n

on the support of ``gamma``. This is the stationarity condition of the
concave objective ``sum_i log sum_b e^{-H_ib/beta} gamma_b`` over the simplex,
and the multiplicative (Blahut-Arimoto) update below ascends it.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError
from .tiling import count_distinct_fixed_points

SUPPORT_EPS = 1e-12


@dataclass(frozen=True)
class EnergyTable:
    H: np.ndarray
    beta: float

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        if H.ndim != 2:
            raise ValueError("H must be an n x A matrix")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if np.any(np.isnan(H)) or np.any(H == -np.inf):
            raise ValueError("H entries must be finite or +inf")
        if not np.all(np.any(np.isfinite(H), axis=1)):
            raise ValueError("every row of H needs at least one finite entry")
        object.__setattr__(self, "H", H)

    def boltzmann(self):
        """``e^{-H/beta}`` with each row shifted by its minimum; ``+inf`` maps to 0."""
        H = self.H
        shift = np.min(np.where(np.isfinite(H), H, np.inf), axis=1, keepdims=True)
        return np.exp(-(H - shift) / self.beta)


@dataclass
class OccupancyVector:
    gamma: np.ndarray
    residual: float
    iterations: int


def condition_values(gamma, E):
    """``r_a = sum_i E_ia / (E gamma)_i``; equals ``n`` on the support at a solution."""
    return (E / (E @ gamma)[:, None]).sum(axis=0)


def residual(gamma, table):
    E = table.boltzmann() if isinstance(table, EnergyTable) else np.asarray(table)
    gamma = np.asarray(gamma, dtype=float)
    n = E.shape[0]
    r = condition_values(gamma, E)
    support = gamma > SUPPORT_EPS
    return float(np.max(np.abs(r[support] - n)))


def _newton_on_support(E, gamma, support, steps=50):
    """Maximise ``sum_i log (E gamma)_i`` on the face spanned by ``support``."""
    Es = E[:, support]
    g = gamma[support] / gamma[support].sum()
    k = len(g)
    for _ in range(steps):
        y = Es @ g
        grad = Es.T @ (1.0 / y)
        hess = -(Es / y[:, None] ** 2).T @ Es
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = hess
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.concatenate([-grad, [0.0]])
        step = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
        t = 1.0
        while np.any(g + t * step <= 0) and t > 1e-12:
            t *= 0.5
        g = g + t * step
        if np.max(np.abs(step)) * t < 1e-15:
            break
    out = np.zeros_like(gamma)
    out[support] = g
    return out


def _polished(E, gamma, tol):
    n = E.shape[0]
    for thresh in (1e-6, 1e-9):
        support = gamma > thresh * gamma.max()
        cand = _newton_on_support(E, gamma, support)
        if np.any(cand < 0):
            continue
        cand /= cand.sum()
        r = condition_values(cand, E)
        on = cand > SUPPORT_EPS
        if np.max(np.abs(r[on] - n)) < tol and np.all(r[~on] <= n + tol):
            return cand
    return None


def solve_gamma(table, tol=1e-10, max_iter=10_000, gamma0=None, polish_every=100):
    """Occupancies by multiplicative updates ``gamma_a <- gamma_a r_a / n``.

    Stops when the support residual ``max |r_a - n|`` drops below ``tol``.
    Every ``polish_every`` iterations a Newton step on the current support is
    tried and kept only if it meets the same residual and leaves every
    off-support cell with ``r_a <= n + tol``; this finishes cases where a
    vanishing cell has ``r_a`` close to ``n`` and the plain update crawls.
    """
    E = table.boltzmann()
    n, A = E.shape
    gamma = np.full(A, 1.0 / A) if gamma0 is None else np.asarray(gamma0, dtype=float).copy()
    gamma /= gamma.sum()
    res = residual(gamma, E)
    it = 0
    while res >= tol:
        if it >= max_iter:
            raise ConvergenceError("occupancy iteration did not converge", res)
        gamma = gamma * condition_values(gamma, E) / n
        gamma /= gamma.sum()
        it += 1
        res = residual(gamma, E)
        if res >= tol and polish_every and it % polish_every == 0:
            cand = _polished(E, gamma, tol)
            if cand is not None:
                gamma = cand
                res = residual(gamma, E)
    return OccupancyVector(gamma, res, it)


def energy_table_from_fixed_points(data, psi, beta, merge_radius, prior=None):
    """Energies ``H_ia = |x_i - c_a|^2 / 2`` against the distinct fixed points ``c_a``.

    Also returns the prior mass of the cells assigned to each fixed point.
    """
    X = np.asarray(getattr(data, "points", data), dtype=float)
    psi = np.asarray(psi, dtype=float)
    k, labels = count_distinct_fixed_points(psi, merge_radius)
    counts = np.bincount(labels, minlength=k)
    centers = np.zeros((k, psi.shape[1]))
    np.add.at(centers, labels, psi)
    centers /= counts[:, None]
    H = 0.5 * np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    prior = np.full(len(psi), 1.0 / len(psi)) if prior is None else np.asarray(prior)
    masses = np.bincount(labels, weights=prior, minlength=k)
    return EnergyTable(H, beta), masses, centers
