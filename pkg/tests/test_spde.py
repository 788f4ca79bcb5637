"""Matern covariance, parameterization identities, SPDE precision."""

import numpy as np
import pytest
import scipy.sparse as sp

from prevmap.geometry import fem_matrices
from prevmap.meshing import build_mesh
from prevmap.sparsela import SparseCholesky
from prevmap.spde import (MaternParams, SpdeTheta, assemble_precision,
                          export_precision, matern_cov, practical_range,
                          sigma_from_tau, tau_from_sigma)


def test_matern_at_zero_is_variance():
    p = MaternParams(sigma2=2.5, kappa=1.3, nu=1.0)
    assert matern_cov(0.0, p) == pytest.approx(2.5)


def test_matern_correlation_at_practical_range():
    # correlation drops to roughly 0.13 at sqrt(8 nu)/kappa
    kappa = np.exp(0.5)
    p = MaternParams(sigma2=1.0, kappa=kappa, nu=1.0)
    d = np.sqrt(8.0) / kappa
    assert d == pytest.approx(1.7155, abs=2e-4)
    corr = matern_cov(d, p)
    assert 0.10 <= corr <= 0.15
    for nu in (1.0, 2.0):
        pn = MaternParams(sigma2=1.0, kappa=2.0, nu=nu)
        c = matern_cov(practical_range(2.0, nu), pn)
        assert 0.10 <= c <= 0.15


def test_matern_exponential_special_case():
    # nu = 1/2 reduces to sigma2 * exp(-kappa d)
    p = MaternParams(sigma2=1.0, kappa=1.0, nu=0.5)
    assert matern_cov(1.0, p) == pytest.approx(np.exp(-1.0), rel=1e-10)
    d = np.linspace(0.01, 5, 40)
    assert np.allclose(matern_cov(d, p), np.exp(-d), rtol=1e-9)


def test_tau_sigma_paper_values():
    # kappa = e^{1/2}, sigma2 = 1/(4 pi)  ->  tau = e^{-1/2}
    tau = tau_from_sigma(1.0 / (4 * np.pi), np.exp(0.5), 1.0)
    assert tau == pytest.approx(np.exp(-0.5), rel=1e-12)
    s2 = sigma_from_tau(np.exp(-0.5), np.exp(0.5), 1.0)
    assert s2 == pytest.approx(1.0 / (4 * np.pi), rel=1e-12)
    assert tau_from_sigma(1.0, 1.0, 1.0) ** 2 == pytest.approx(1 / (4 * np.pi))


def test_tau_sigma_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s2 = float(rng.uniform(0.01, 10))
        kappa = float(rng.uniform(0.1, 5))
        nu = float(rng.uniform(0.5, 3))
        tau = tau_from_sigma(s2, kappa, nu)
        assert sigma_from_tau(tau, kappa, nu) == pytest.approx(s2, rel=1e-12)


def test_practical_range_values():
    assert practical_range(np.exp(0.5), 1.0) == pytest.approx(1.7155, abs=1e-4)
    assert practical_range(np.sqrt(8.0), 1.0) == pytest.approx(1.0)


def test_assemble_precision_spd_and_pattern(coarse_fem10):
    c, g = coarse_fem10
    theta = SpdeTheta(np.log(tau_from_sigma(0.5, 1.0)), 0.0)
    q = assemble_precision(c, g, theta)
    SparseCholesky(q)  # SPD: factorization succeeds
    assert abs(q - q.T).max() < 1e-12


def test_assemble_rejects_non_diagonal_mass(coarse_fem10):
    _, g = coarse_fem10
    with pytest.raises(ValueError):
        assemble_precision(g, g, SpdeTheta(0.0, 0.0))


def test_large_kappa_kills_correlation(coarse_fem10):
    # as kappa grows with sigma2 held fixed, off-diagonal correlation -> 0
    c, g = coarse_fem10
    sigma2 = 1.0
    cors = []
    for kappa in (1.0, 8.0):
        tau = tau_from_sigma(sigma2, kappa)
        q = assemble_precision(c, g, SpdeTheta(np.log(tau), np.log(kappa)),
                               check=False)
        f = SparseCholesky(q)
        i, j = 200, 260  # two interior vertices at a fixed distance
        cols = f.solve_columns([i, j])
        cors.append(abs(cols[j, 0]) / np.sqrt(cols[i, 0] * cols[j, 1]))
    assert cors[1] < cors[0] * 0.2


@pytest.fixture(scope="module")
def spde_oracle_mesh(square10):
    mesh = build_mesh(square10, interior_max_edge=0.35, extension_factor=1.5,
                      exterior_max_edge=2.0)
    return mesh, fem_matrices(mesh)


def _fem_correlations(mesh, c, g, params, max_dist=5.0, min_dist=0.0):
    tau = tau_from_sigma(params.sigma2, params.kappa, params.nu)
    q = assemble_precision(c, g, SpdeTheta(np.log(tau), np.log(params.kappa)),
                           check=False)
    f = SparseCholesky(q)
    center = np.array([5.0, 5.0])
    dc = np.linalg.norm(mesh.vertices - center, axis=1)
    anchor = int(np.argmin(dc))
    cand = np.where(dc < max_dist * 1.05)[0]
    d_all = np.linalg.norm(mesh.vertices[cand] - mesh.vertices[anchor], axis=1)
    sel = cand[(d_all >= min_dist) & (d_all <= max_dist)]
    sel = sel[:: max(1, len(sel) // 150)]
    cols = f.solve_columns(np.concatenate([[anchor], sel]))
    var_a = cols[anchor, 0]
    var_s = cols[sel, 1:][np.arange(len(sel)), np.arange(len(sel))]
    corr = cols[sel, 0] / np.sqrt(var_a * var_s)
    dist = np.linalg.norm(mesh.vertices[sel] - mesh.vertices[anchor], axis=1)
    return dist, corr, var_a, var_s


def test_spde_correlation_matches_matern(spde_oracle_mesh):
    mesh, (c, g) = spde_oracle_mesh
    params = MaternParams(sigma2=1.0 / (4 * np.pi), kappa=np.exp(0.5), nu=1.0)
    dist, corr, _, _ = _fem_correlations(mesh, c, g, params,
                                         min_dist=0.7, max_dist=5.0)
    target = matern_cov(dist, params) / params.sigma2
    assert np.abs(corr - target).max() < 0.05


def test_spde_marginal_variance_near_sigma2(spde_oracle_mesh):
    mesh, (c, g) = spde_oracle_mesh
    params = MaternParams(sigma2=1.0 / (4 * np.pi), kappa=np.exp(0.5), nu=1.0)
    _, _, var_a, var_s = _fem_correlations(mesh, c, g, params, max_dist=3.0)
    allv = np.concatenate([[var_a], var_s])
    assert np.abs(allv / params.sigma2 - 1.0).max() < 0.10


def test_spde_interior_variance_stationarity(spde_oracle_mesh):
    # coefficient of variation of interior-vertex variances < 10%
    mesh, (c, g) = spde_oracle_mesh
    params = MaternParams(sigma2=1.0, kappa=np.exp(0.5), nu=1.0)
    tau = tau_from_sigma(params.sigma2, params.kappa)
    q = assemble_precision(c, g, SpdeTheta(np.log(tau), np.log(params.kappa)),
                           check=False)
    f = SparseCholesky(q)
    rng = np.random.default_rng(0)
    interior = np.where(
        (np.abs(mesh.vertices[:, 0] - 5) < 4)
        & (np.abs(mesh.vertices[:, 1] - 5) < 4))[0]
    sel = rng.choice(interior, size=60, replace=False)
    cols = f.solve_columns(sel)
    v = cols[sel, np.arange(len(sel))]
    assert v.std() / v.mean() < 0.10


def test_precision_export(tmp_path, coarse_fem10):
    from scipy.io import mmread
    c, g = coarse_fem10
    q = assemble_precision(c, g, SpdeTheta(0.0, 0.0), check=False)
    path = tmp_path / "q.mtx"
    export_precision(path, q)
    assert np.abs(mmread(str(path)).toarray() - q.toarray()).max() < 1e-12
