"""High-capacity beta-VAE on a discrete latent basis.

The latent box ``[low, high]^d`` is split into ``G^d`` axis-aligned cells.
The decoder is piecewise constant, ``g(z) = psi[a(z)]``, and each posterior
is the prior reweighted per cell, ``q(z|x_i) = pi(z) * m[i, a(z)]``. The
ELBO fixed point alternates

    m[i, b]  = exp(-|x_i - psi_b|^2 / 2beta) / c_i
    psi_b    = sum_i m[i, b] x_i / sum_j m[j, b]

which is the normalised-Gaussian-kernel pre-image iteration.
"""
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import kernels
from .datasets import as_dataset
from .errors import DeadCellError, DivergedError, DomainError, EmptyDatasetError

MAX_LATENT_DIM = 3


@dataclass(frozen=True)
class LatentGrid:
    dim: int = 2
    resolution: int = 32
    low: float = -0.5
    high: float = 0.5

    def __post_init__(self):
        if not 1 <= self.dim <= MAX_LATENT_DIM:
            raise ValueError(f"latent dim must be in 1..{MAX_LATENT_DIM}, got {self.dim}")
        if self.resolution < 1:
            raise ValueError("resolution must be positive")
        if not self.high > self.low:
            raise ValueError("empty latent box")

    @property
    def size(self):
        return self.resolution**self.dim

    @property
    def width(self):
        return (self.high - self.low) / self.resolution

    @cached_property
    def edges(self):
        return self.low + self.width * np.arange(self.resolution + 1)

    @cached_property
    def centers(self):
        axis = self.low + self.width * (np.arange(self.resolution) + 0.5)
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def volumes(self):
        return np.full(self.size, self.width**self.dim)

    @cached_property
    def prior(self):
        # uniform prior density on the box
        return self.volumes / (self.high - self.low) ** self.dim

    def cell_index(self, z):
        """Index of the cell containing ``z``.

        Cells are ``(lo, hi]`` per axis with the first cell closed, so a point
        on an interior edge belongs to the lower-index cell.
        """
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if z.shape != (self.dim,):
            raise ValueError(f"expected a point of dimension {self.dim}")
        if np.any(z < self.low) or np.any(z > self.high) or not np.all(np.isfinite(z)):
            raise DomainError(f"latent out of domain: {z.tolist()}")
        k = np.searchsorted(self.edges, z, side="left") - 1
        k = np.clip(k, 0, self.resolution - 1)
        return int(np.ravel_multi_index(tuple(k), (self.resolution,) * self.dim))


@dataclass(frozen=True)
class IterationConfig:
    beta: float
    smoothing: float = 0.9
    max_iter: int = 400
    tol: float = 1e-3
    init_noise: float = 0.1
    seed: int = 0
    record_trajectory: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class Reconstruction:
    psi: np.ndarray
    weights: np.ndarray
    dead: np.ndarray


@dataclass
class FixedPointResult:
    psi: np.ndarray
    posterior: np.ndarray
    iterations: int
    converged: bool
    trajectory: Optional[np.ndarray] = None
    underflow_events: int = 0
    deltas: list = field(default_factory=list)


def init_psi(grid, data, cfg):
    """Initial reconstructions: grid centres (or random data points when the
    data and latent dimensions differ) plus uniform noise."""
    data = as_dataset(data)
    rng = np.random.default_rng(cfg.seed)
    X = data.points
    if X.shape[1] == grid.dim:
        base = grid.centers.copy()
    else:
        base = X[rng.integers(0, X.shape[0], size=grid.size)].copy()
    h = cfg.init_noise
    if h > 0:
        base += rng.uniform(-h, h, size=base.shape)
    return base


def posterior_step(psi, data, grid, beta):
    if not beta > 0:
        raise ValueError("beta must be positive")
    psi = np.asarray(psi, dtype=float)
    if not np.all(np.isfinite(psi)):
        raise DivergedError("diverged reconstruction")
    X = as_dataset(data).points
    return kernels.posterior(X, psi, grid.prior, beta)


def hard_posterior_step(psi, data, grid):
    """The ``beta -> 0`` limit of :func:`posterior_step`.

    Each datum puts mass on the cells whose reconstruction is nearest to it,
    normalised so that ``sum_a m[i, a] pi_a = 1``.
    """
    X = as_dataset(data).points
    d2 = kernels.sq_distances(X, np.asarray(psi, dtype=float))
    hit = d2 == d2.min(axis=1, keepdims=True)
    M = hit.astype(float)
    return M / (M @ grid.prior)[:, None]


def reconstruction_step(M, data, previous=None):
    """Posterior-weighted means of the data, one per cell.

    A column with zero total mass raises :class:`DeadCellError` unless
    ``previous`` is given, in which case that cell keeps its previous value.
    """
    X = as_dataset(data).points
    M = np.asarray(M, dtype=float)
    colmass = M.sum(axis=0)
    dead = colmass <= 0.0
    if dead.any() and previous is None:
        raise DeadCellError(np.flatnonzero(dead))
    prev = np.zeros((M.shape[1], X.shape[1])) if previous is None else previous
    psi, _ = kernels.centroids(M, X, prev)
    weights = np.divide(M, colmass, out=np.zeros_like(M), where=~dead)
    return Reconstruction(psi, weights, dead)


def decode(z, psi, grid):
    return np.asarray(psi)[grid.cell_index(z)]


def objective_terms(M, psi, data, grid, beta=None):
    """Expected distortion and rate (mean KL to the prior) for a tiling state.

    ``beta`` is accepted for symmetry with the other steps; neither term
    depends on it directly.
    """
    X = as_dataset(data).points
    M = np.asarray(M, dtype=float)
    n = X.shape[0]
    w = M * grid.prior[None, :]
    d2 = kernels.sq_distances(X, np.asarray(psi, dtype=float))
    distortion = float(np.sum(w * d2) / n)
    logm = np.log(M, out=np.zeros_like(M), where=M > 0)
    rate = float(np.sum(w * logm) / n)
    return {"distortion": distortion, "rate": rate}


def count_distinct_fixed_points(psi, merge_radius):
    """Single-linkage clusters of the reconstruction vectors.

    Returns ``(count, labels)``; two vectors are linked when their distance is
    at most ``merge_radius``. Labels are numbered in order of first appearance.
    """
    if not merge_radius > 0:
        raise ValueError("merge_radius must be positive")
    psi = np.asarray(psi, dtype=float)
    A = psi.shape[0]
    pairs = cKDTree(psi).query_pairs(merge_radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(A, A))
    count, raw = connected_components(graph, directed=False)
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(np.argsort(first))
    return int(count), order[raw]


def _iterate(data, grid, cfg, project=None, psi0=None):
    data = as_dataset(data)
    X = data.points
    prior = grid.prior
    psi = init_psi(grid, data, cfg) if psi0 is None else np.array(psi0, dtype=float)
    a = cfg.smoothing
    traj = [psi.copy()] if cfg.record_trajectory else None
    converged = False
    underflow = 0
    deltas = []
    it = 0
    for it in range(1, cfg.max_iter + 1):
        M, raw, colmass = kernels.fixed_point_map(X, psi, prior, cfg.beta)
        underflow += int(np.count_nonzero(colmass <= 0.0))
        if project is not None:
            raw = project(raw, M, colmass, psi)
        new = a * psi + (1.0 - a) * raw
        if not np.all(np.isfinite(new)):
            raise DivergedError("diverged reconstruction")
        delta = float(np.sqrt(np.max(np.sum((new - psi) ** 2, axis=1))))
        deltas.append(delta)
        psi = new
        if traj is not None:
            traj.append(psi.copy())
        if delta < cfg.tol:
            converged = True
            break
    M = kernels.posterior(X, psi, prior, cfg.beta)
    return FixedPointResult(
        psi=psi,
        posterior=M,
        iterations=it,
        converged=converged,
        trajectory=None if traj is None else np.stack(traj),
        underflow_events=underflow,
        deltas=deltas,
    )


def smoothed_iterate(data, grid, cfg, psi0=None):
    """Damped fixed-point iteration ``psi <- a psi + (1 - a) F(psi)``.

    Stops when the largest per-cell move of the smoothed sequence drops below
    ``cfg.tol`` or after ``cfg.max_iter`` steps. ``psi0`` overrides the
    seeded initialisation (used for warm starts).
    """
    data = as_dataset(data)
    if data.n == 0:
        raise EmptyDatasetError()
    return _iterate(data, grid, cfg, psi0=psi0)


def with_beta(cfg, beta, seed=None):
    return replace(cfg, beta=beta, seed=cfg.seed if seed is None else seed)
