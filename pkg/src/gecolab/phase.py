"""Beta sweeps, the reconstruction order parameter and critical temperatures."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import as_dataset
from .io import write_csv
from .seeds import derive_seed
from .tiling import IterationConfig, count_distinct_fixed_points, objective_terms, smoothed_iterate

SWEEP_COLUMNS = ("beta", "u", "d2u", "cluster_count", "converged", "iterations")


@dataclass(frozen=True)
class BetaSweepConfig:
    betas: tuple = tuple(np.logspace(-4, 0, 64))
    iteration: IterationConfig = IterationConfig(beta=1.0)
    restart: str = "fresh"
    top_k: int = 3
    merge_radius: float = 0.05
    workers: int = 1
    min_height: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float)
        if b.ndim != 1 or len(b) < 1 or np.any(b <= 0):
            raise ValueError("betas must be a non-empty list of positive values")
        if np.any(np.diff(b) <= 0):
            raise ValueError("betas must be strictly increasing")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.restart not in ("fresh", "warm"):
            raise ValueError("restart must be 'fresh' or 'warm'")
        if self.restart == "warm" and self.workers != 1:
            raise ValueError("warm starts are sequential; use workers=1")
        object.__setattr__(self, "betas", tuple(float(x) for x in b))


@dataclass
class BetaRecord:
    beta: float
    u: float
    cluster_count: int
    converged: bool
    iterations: int
    rate: float = 0.0


@dataclass
class SweepResult:
    records: list
    d2u: np.ndarray
    critical: list = field(default_factory=list)
    fixed_points: list = field(default_factory=list)

    @property
    def betas(self):
        return np.array([r.beta for r in self.records])

    @property
    def u(self):
        return np.array([r.u for r in self.records])

    @property
    def cluster_counts(self):
        return np.array([r.cluster_count for r in self.records])

    def rows(self):
        for rec, d2 in zip(self.records, self.d2u):
            yield (rec.beta, rec.u, float(d2), rec.cluster_count, rec.converged, rec.iterations)


def second_derivative(u, beta):
    """Three-point second difference of ``u`` on a non-uniform ``beta`` grid.

    Exact for quadratics. The two endpoints are set to zero.
    """
    u = np.asarray(u, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if u.shape != beta.shape or u.ndim != 1:
        raise ValueError("u and beta must be aligned 1-D arrays")
    if len(beta) < 3:
        raise ValueError("need at least 3 grid points")
    h = np.diff(beta)
    if np.any(h == 0):
        raise ValueError("duplicate beta values")
    if np.any(h < 0):
        raise ValueError("beta must be increasing")
    h1, h2 = h[:-1], h[1:]
    out = np.zeros_like(u)
    out[1:-1] = 2.0 * (h1 * u[2:] - (h1 + h2) * u[1:-1] + h2 * u[:-2]) / (h1 * h2 * (h1 + h2))
    return out


def detect_critical(d2, beta, top_k=3, min_height=0.0):
    """Interior local maxima of ``|d2|`` as ``(beta_c, height)`` pairs.

    A maximum must exceed both neighbours; a flat run counts once, at its
    left-most point, when both sides of the run are lower. Results are sorted
    by height (descending, ties to the smaller beta) and truncated to ``top_k``.
    """
    h = np.abs(np.asarray(d2, dtype=float))
    beta = np.asarray(beta, dtype=float)
    if h.shape != beta.shape:
        raise ValueError("d2 and beta must be aligned")
    found = []
    N = len(h)
    i = 1
    while i < N - 1:
        j = i
        while j + 1 < N - 1 and h[j + 1] == h[i]:
            j += 1
        if h[i] > h[i - 1] and h[i] > h[j + 1] and h[i] > min_height:
            found.append((float(beta[i]), float(h[i])))
        i = j + 1
    found.sort(key=lambda t: (-t[1], t[0]))
    return found[:top_k]


def _run_one(data, grid, cfg, beta, index, psi0=None):
    it_cfg = replace(cfg.iteration, beta=beta, seed=derive_seed(cfg.iteration.seed, "beta", index))
    res = smoothed_iterate(data, grid, it_cfg, psi0=psi0)
    terms = objective_terms(res.posterior, res.psi, data, grid, beta)
    count, _ = count_distinct_fixed_points(res.psi, cfg.merge_radius)
    rec = BetaRecord(beta, terms["distortion"], count, res.converged, res.iterations, terms["rate"])
    return rec, res.psi


def sweep(data, grid, cfg):
    """Run the smoothed iteration at every beta and locate the transitions.

    Under ``restart="fresh"`` each beta gets its own seed derived from the
    template seed and its index, so runs are independent and may be executed
    in parallel; results are always ordered by beta.
    """
    data = as_dataset(data)
    betas = cfg.betas
    if cfg.restart == "warm":
        out, psi = [], None
        for k, b in enumerate(betas):
            rec, psi = _run_one(data, grid, cfg, b, k, psi0=psi)
            out.append((rec, psi))
    elif cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            out = list(ex.map(lambda kb: _run_one(data, grid, cfg, kb[1], kb[0]), enumerate(betas)))
    else:
        out = [_run_one(data, grid, cfg, b, k) for k, b in enumerate(betas)]
    records = [r for r, _ in out]
    u = np.array([r.u for r in records])
    if len(betas) >= 3:
        d2 = second_derivative(u, np.array(betas))
    else:
        d2 = np.zeros(len(betas))
    crit = detect_critical(d2, np.array(betas), cfg.top_k, cfg.min_height)
    return SweepResult(records, d2, crit, [p for _, p in out])


def write_sweep_csv(result, path):
    write_csv(path, SWEEP_COLUMNS, result.rows())
