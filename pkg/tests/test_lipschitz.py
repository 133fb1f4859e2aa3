import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gecolab import kernels
from gecolab.datasets import mixture_of_lines
from gecolab.errors import StiffConstraintError
from gecolab.lipschitz import (
    LipschitzSpec,
    build_multipliers,
    build_projection,
    compute_K,
    coupling_matrix,
    fixed_point_diameter,
    laplacian,
    projected_iterate,
    write_trajectory_csv,
)
from gecolab.tiling import IterationConfig, LatentGrid, count_distinct_fixed_points, smoothed_iterate


def _mc_K(grid, a, b, rng, samples):
    lo_a = grid.centers[a] - grid.width / 2
    lo_b = grid.centers[b] - grid.width / 2
    z = lo_a + grid.width * rng.random((samples, grid.dim))
    zp = lo_b + grid.width * rng.random((samples, grid.dim))
    vals = grid.volumes[a] * grid.volumes[b] * np.sum((z - zp) ** 2, axis=1)
    return vals.mean(), vals.std(ddof=1) / np.sqrt(samples)


def test_K_same_unit_cell():
    grid = LatentGrid(dim=1, resolution=1)
    K = compute_K(grid)
    assert K[0, 0] == pytest.approx(1 / 6, abs=1e-15)
    est, se = _mc_K(grid, 0, 0, np.random.default_rng(0), 10**6)
    assert abs(est - 1 / 6) < 3 * se


def test_K_adjacent_unit_cells():
    grid = LatentGrid(dim=1, resolution=2, low=-1.0, high=1.0)
    K = compute_K(grid)
    assert K[0, 1] == pytest.approx(1 + 1 / 6, abs=1e-15)
    est, se = _mc_K(grid, 0, 1, np.random.default_rng(1), 10**6)
    assert abs(est - (1 + 1 / 6)) < 3 * se


def test_K_matches_monte_carlo_on_random_pairs():
    grid = LatentGrid(dim=2, resolution=6)
    K = compute_K(grid)
    rng = np.random.default_rng(2)
    for a, b in rng.integers(0, grid.size, size=(20, 2)):
        est, se = _mc_K(grid, a, b, rng, 10**5)
        assert abs(est - K[a, b]) < 3 * se


def test_coupling_matrices_symmetric():
    grid = LatentGrid(resolution=5)
    K = compute_K(grid)
    C = coupling_matrix(grid, K, lipschitz=2.0)
    W = build_multipliers(grid, LipschitzSpec(radius=0.3, strength=0.7)) * C
    for mat in (K, C, W):
        np.testing.assert_allclose(mat, mat.T, atol=1e-12)
    assert np.all(K > 0)
    assert np.all(np.diag(W) == 0)


def test_multiplier_masks():
    grid = LatentGrid(resolution=3)
    assert not build_multipliers(grid, LipschitzSpec(strength=0.0)).any()
    assert not build_multipliers(grid, LipschitzSpec(radius=0.9 * grid.width, strength=1.0)).any()
    omega = build_multipliers(grid, LipschitzSpec(radius=1.5 * grid.width, strength=2.0))
    counts = np.count_nonzero(omega, axis=1)
    assert counts[4] == 8
    assert counts[[0, 2, 6, 8]].tolist() == [3, 3, 3, 3]
    assert set(np.unique(omega)) == {0.0, 2.0}
    glob = build_multipliers(grid, LipschitzSpec(mode="global", radius=0.01, strength=1.0))
    assert np.count_nonzero(glob) == 9 * 8


def test_spec_validation():
    with pytest.raises(ValueError):
        LipschitzSpec(radius=0.0)
    with pytest.raises(ValueError):
        LipschitzSpec(strength=-1.0)
    with pytest.raises(ValueError):
        LipschitzSpec(lipschitz=0.0)
    with pytest.raises(ValueError):
        LipschitzSpec(mode="banded")


def test_projection_identity_without_coupling():
    grid = LatentGrid(resolution=4)
    M = np.random.default_rng(0).random((10, 16))
    proj = build_projection(M, grid, 0.1, np.zeros((16, 16)))
    assert np.array_equal(proj.P, np.eye(16))


def test_projection_two_cell_closed_form():
    grid = LatentGrid(dim=1, resolution=2)
    n, beta, w = 3, 0.2, 0.8
    M = np.full((n, 2), 1.0)
    W = np.array([[0.0, w], [w, 0.0]])
    P = build_projection(M, grid, beta, W).P
    D = n * beta / (grid.prior[0] * n)
    expected = np.array([[1 + D * w, D * w], [D * w, 1 + D * w]]) / (1 + 2 * D * w)
    np.testing.assert_allclose(P, expected, atol=1e-12)


def _random_problem(seed, G=4, n=12):
    rng = np.random.default_rng(seed)
    grid = LatentGrid(resolution=G)
    X = rng.uniform(-0.4, 0.4, (n, 2))
    psi = rng.uniform(-0.4, 0.4, (grid.size, 2))
    beta = 10 ** rng.uniform(-2, 0)
    W = build_multipliers(grid, LipschitzSpec(radius=0.3, strength=10 ** rng.uniform(-4, 0))) * coupling_matrix(grid)
    return grid, X, psi, beta, W


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_projection_preserves_constants(seed):
    grid, X, psi, beta, W = _random_problem(seed)
    M = kernels.posterior(X, psi, grid.prior, beta)
    P = build_projection(M, grid, beta, W).P
    np.testing.assert_allclose(P @ np.ones(grid.size), 1.0, atol=1e-10)


def test_projected_update_is_stationary_point_of_penalised_distortion():
    # energy: sum_a s_a |psi_a - F_a|^2 / 2 + 1/4 sum_ab W_ab |psi_a - psi_b|^2
    grid, X, psi, beta, W = _random_problem(7)
    M, F, colmass = kernels.fixed_point_map(X, psi, grid.prior, beta)
    s = grid.prior * colmass / (len(X) * beta)
    out = build_projection(M, grid, beta, W).P @ F

    def energy(p):
        diff = p[:, None, :] - p[None, :, :]
        return 0.5 * np.sum(s[:, None] * (p - F) ** 2) + 0.25 * np.sum(W[:, :, None] * diff**2)

    h = 1e-6
    for a in (0, 5, 11):
        for k in range(2):
            up, dn = out.copy(), out.copy()
            up[a, k] += h
            dn[a, k] -= h
            grad = (energy(up) - energy(dn)) / (2 * h)
            assert abs(grad) < 1e-8 * max(1.0, np.abs(s).max())


def test_laplacian_rows_sum_to_zero():
    W = np.random.default_rng(3).random((6, 6))
    W = W + W.T
    np.fill_diagonal(W, 0)
    np.testing.assert_allclose(laplacian(W).sum(axis=1), 0.0, atol=1e-12)


def test_stiff_constraint_reports_parameters():
    grid = LatentGrid(resolution=3)
    M = np.ones((4, 9))
    W = build_multipliers(grid, LipschitzSpec(mode="global", strength=1.0)) * coupling_matrix(grid)
    with pytest.raises(StiffConstraintError, match="constraint too stiff: omega=1.0, beta=1e"):
        build_projection(M, grid, 1e16, W, omega=1.0)


def test_zero_strength_reproduces_unconstrained_trajectory():
    data = mixture_of_lines(60, seed=1)
    grid = LatentGrid(resolution=8)
    cfg = IterationConfig(beta=0.01, record_trajectory=True, max_iter=60)
    free = smoothed_iterate(data, grid, cfg)
    proj = projected_iterate(data, grid, cfg, LipschitzSpec(strength=0.0))
    assert free.trajectory.shape == proj.trajectory.shape
    assert np.max(np.abs(free.trajectory - proj.trajectory)) <= 1e-12


def test_local_constraint_links_fixed_points_into_chains():
    data = mixture_of_lines(200, seed=1)
    grid = LatentGrid(resolution=16)
    cfg = IterationConfig(beta=3e-3)
    free = smoothed_iterate(data, grid, cfg)
    chained = projected_iterate(data, grid, cfg, LipschitzSpec(mode="local", radius=0.2, strength=1e-3))
    k_free, _ = count_distinct_fixed_points(free.psi, 0.05)
    k_chain, _ = count_distinct_fixed_points(chained.psi, 0.05)
    assert k_chain < k_free


def test_diameter_and_trajectory_csv(tmp_path):
    assert fixed_point_diameter(np.zeros((1, 2))) == 0.0
    assert fixed_point_diameter(np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])) == 5.0
    traj = np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2)
    path = tmp_path / "lipschitz_trajectory.csv"
    write_trajectory_csv(traj, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["iter", "cell", "x0", "x1"]
    assert rows[4] == ["1", "0", "6", "7"]
    assert len(rows) == 7
