"""Sparse SPD factorization built on SuperLU in symmetric mode.

SuperLU with ``diag_pivot_thresh=0`` and ``SymmetricMode=True`` applies a
fill-reducing symmetric ordering (minimum degree on A^T+A) and, for an SPD
input, produces U = D L^T with no row pivoting, which makes the LU
factorization an LDL^T / Cholesky factorization in disguise.  The wrapper
exposes the pieces needed elsewhere: solves, log-determinant, and the
half-solve used to draw Gaussian vectors with precision Q.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NotPositiveDefiniteError


def _smallest_eig_estimate(q):
    try:
        if q.shape[0] <= 400:
            return float(np.linalg.eigvalsh(q.toarray()).min())
        vals = spla.eigsh(q, k=1, which="SA", maxiter=500,
                          return_eigenvectors=False)
        return float(vals[0])
    except Exception:
        return None


def check_symmetric(mat, rtol=1e-12):
    """True when ``mat`` is symmetric within relative tolerance."""
    d = abs(mat - mat.T)
    scale = abs(mat).max() or 1.0
    return d.max() <= rtol * scale


class SparseCholesky:
    """Cholesky-type factorization of a sparse SPD matrix.

    Raises :class:`NotPositiveDefiniteError` (with a smallest-eigenvalue
    estimate when obtainable) if the input is not positive definite.
    """

    def __init__(self, q):
        q = sp.csc_matrix(q)
        if q.shape[0] != q.shape[1]:
            raise ValueError("matrix must be square")
        self.n = q.shape[0]
        try:
            self._lu = spla.splu(
                q,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:
            raise NotPositiveDefiniteError(
                f"sparse factorization failed: {exc}",
                min_eigenvalue=_smallest_eig_estimate(q),
            ) from exc
        if not np.array_equal(self._lu.perm_r, self._lu.perm_c):
            raise NotPositiveDefiniteError(
                "factorization required pivoting; matrix is not SPD",
                min_eigenvalue=_smallest_eig_estimate(q),
            )
        d = self._lu.U.diagonal()
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise NotPositiveDefiniteError(
                "non-positive pivot encountered; matrix is not SPD",
                min_eigenvalue=_smallest_eig_estimate(q),
            )
        self._diag = d
        self._perm = self._lu.perm_c
        self._lt = None

    @property
    def logdet(self):
        return float(np.log(self._diag).sum())

    def solve(self, b):
        """Solve Q x = b; b may be a vector or a (n, k) matrix."""
        return self._lu.solve(np.ascontiguousarray(b, dtype=float))

    def sample(self, z):
        """Map standard normal draws z (n,) or (n, k) to N(0, Q^{-1}) draws.

        Uses the half-solve x = P^T L^{-T} D^{-1/2} z so that cov(x) = Q^{-1}.
        """
        z = np.asarray(z, dtype=float)
        if self._lt is None:
            self._lt = sp.csr_matrix(self._lu.L.T)
        rhs = z / np.sqrt(self._diag).reshape(-1, *([1] * (z.ndim - 1)))
        w = spla.spsolve_triangular(self._lt, rhs, lower=False)
        return w[self._perm]

    def solve_columns(self, indices):
        """Columns of Q^{-1} for the given indices, shape (n, len(indices))."""
        e = np.zeros((self.n, len(indices)))
        e[np.asarray(indices, dtype=int), np.arange(len(indices))] = 1.0
        return self.solve(e)


def export_matrix_market(path, mat, comment=""):
    """Write a sparse matrix in Matrix Market coordinate text format."""
    from scipy.io import mmwrite

    mmwrite(str(path), sp.coo_matrix(mat), comment=comment)
