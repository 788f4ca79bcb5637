"""Sparse SPD factorization wrapper."""

import numpy as np
import pytest
import scipy.sparse as sp

from prevmap.errors import NotPositiveDefiniteError
from prevmap.sparsela import SparseCholesky, check_symmetric, export_matrix_market


def _random_spd(n, seed=0, density=0.05):
    rng = np.random.default_rng(seed)
    a = sp.random(n, n, density=density, random_state=rng)
    return (a @ a.T + sp.eye(n)).tocsc()


def test_solve_and_logdet():
    q = _random_spd(150, seed=1)
    f = SparseCholesky(q)
    rng = np.random.default_rng(2)
    b = rng.standard_normal(150)
    assert np.allclose(q @ f.solve(b), b, atol=1e-10)
    dense = q.toarray()
    assert f.logdet == pytest.approx(np.linalg.slogdet(dense)[1], abs=1e-9)


def test_solve_matrix_rhs():
    q = _random_spd(80, seed=3)
    f = SparseCholesky(q)
    b = np.random.default_rng(4).standard_normal((80, 7))
    x = f.solve(b)
    assert np.allclose(q @ x, b, atol=1e-9)


def test_sample_covariance_matches_inverse():
    q = _random_spd(60, seed=5)
    f = SparseCholesky(q)
    rng = np.random.default_rng(6)
    x = f.sample(rng.standard_normal((60, 200000)))
    emp = x @ x.T / x.shape[1]
    target = np.linalg.inv(q.toarray())
    scale = np.abs(target).max()
    assert np.abs(emp - target).max() < 0.02 * scale * 10


def test_not_spd_raises():
    q = sp.diags([1.0, -1.0, 2.0]).tocsc()
    with pytest.raises(NotPositiveDefiniteError):
        SparseCholesky(q)
    # indefinite symmetric matrix
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(NotPositiveDefiniteError):
        SparseCholesky(sp.csc_matrix(a))


def test_check_symmetric():
    q = _random_spd(30, seed=7)
    assert check_symmetric(q)
    q2 = q.tolil()
    q2[0, 1] += 1.0
    assert not check_symmetric(q2.tocsc())


def test_matrix_market_export(tmp_path):
    from scipy.io import mmread
    q = _random_spd(25, seed=8)
    path = tmp_path / "q.mtx"
    export_matrix_market(path, q)
    back = mmread(str(path))
    assert np.allclose(back.toarray(), q.toarray())
