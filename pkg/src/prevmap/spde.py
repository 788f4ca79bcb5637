"""Matern covariance and its sparse Markov approximation on a mesh.

The continuously indexed Matern field with smoothness nu = 1 solves a
second-order stochastic PDE whose finite-element discretization on a
triangulation yields a Gaussian vector of basis weights with sparse
precision Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G).  With the
lumped (diagonal) mass matrix C this stays sparse and the implied field
approximates the Matern covariance away from the mesh boundary.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma as _gamma, kv as _kv

from .errors import NotPositiveDefiniteError
from .sparsela import SparseCholesky, export_matrix_market

__all__ = [
    "MaternParams",
    "SpdeTheta",
    "matern_cov",
    "tau_from_sigma",
    "sigma_from_tau",
    "practical_range",
    "assemble_precision",
    "export_precision",
]


@dataclass(frozen=True)
class MaternParams:
    """Marginal variance, scale and smoothness of a Matern field."""

    sigma2: float
    kappa: float
    nu: float = 1.0

    def __post_init__(self):
        if self.sigma2 <= 0 or self.kappa <= 0 or self.nu <= 0:
            raise ValueError("MaternParams must all be positive")

    @property
    def alpha(self):
        # SPDE exponent in two dimensions
        return self.nu + 1.0


@dataclass(frozen=True)
class SpdeTheta:
    """Log-scale SPDE parameters (theta1 = log tau, theta2 = log kappa)."""

    log_tau: float
    log_kappa: float

    def __post_init__(self):
        if not (np.isfinite(self.log_tau) and np.isfinite(self.log_kappa)):
            raise ValueError("SpdeTheta must be finite")

    @property
    def tau(self):
        return float(np.exp(self.log_tau))

    @property
    def kappa(self):
        return float(np.exp(self.log_kappa))


def matern_cov(distance, params):
    """Matern covariance at the given distance(s); sigma2 at distance zero."""
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    nu, kappa = params.nu, params.kappa
    out = np.full(d.shape, params.sigma2)
    pos = d > 0
    kd = kappa * d[pos]
    out[pos] = params.sigma2 * (2.0 ** (1 - nu) / _gamma(nu)) \
        * kd ** nu * _kv(nu, kd)
    # kv underflows to 0 for large arguments, which is the right limit
    out[pos] = np.nan_to_num(out[pos], nan=0.0)
    return out if np.ndim(distance) else float(out)


def tau_from_sigma(sigma2, kappa, nu=1.0):
    """Scale tau such that the SPDE field has marginal variance sigma2.

    tau^2 = Gamma(nu) / (Gamma(alpha) * 4 pi * kappa^(2 nu) * sigma2), with
    alpha = nu + 1 in two dimensions.
    """
    if sigma2 <= 0 or kappa <= 0 or nu <= 0:
        raise ValueError("arguments must be positive")
    alpha = nu + 1.0
    tau2 = _gamma(nu) / (_gamma(alpha) * 4.0 * np.pi * kappa ** (2 * nu) * sigma2)
    return float(np.sqrt(tau2))


def sigma_from_tau(tau, kappa, nu=1.0):
    """Marginal variance implied by (tau, kappa); inverse of tau_from_sigma."""
    if tau <= 0 or kappa <= 0 or nu <= 0:
        raise ValueError("arguments must be positive")
    alpha = nu + 1.0
    return float(_gamma(nu) / (_gamma(alpha) * 4.0 * np.pi
                               * kappa ** (2 * nu) * tau ** 2))


def practical_range(kappa, nu=1.0):
    """Distance sqrt(8 nu) / kappa at which correlation drops to about 0.13."""
    if kappa <= 0 or nu <= 0:
        raise ValueError("arguments must be positive")
    return float(np.sqrt(8.0 * nu) / kappa)


def assemble_precision(c, g, theta, check=True):
    """Sparse GMRF precision of the basis weights for alpha = 2 (nu = 1).

    Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G) with C the lumped mass
    matrix and G the stiffness matrix of the same mesh.  ``check=True``
    verifies positive definiteness by factorization.
    """
    cd = np.asarray(sp.csc_matrix(c).diagonal())
    if np.any(cd <= 0):
        raise ValueError("mass matrix diagonal must be positive")
    if sp.csc_matrix(c).nnz != len(cd):
        raise ValueError("mass matrix must be diagonal (lumped)")
    tau = theta.tau
    kappa = theta.kappa
    g = sp.csc_matrix(g)
    gcg = g @ sp.diags(1.0 / cd) @ g
    q = tau ** 2 * (kappa ** 4 * sp.diags(cd) + 2.0 * kappa ** 2 * g + gcg)
    q = ((q + q.T) * 0.5).tocsc()
    if check:
        try:
            SparseCholesky(q)
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(
                f"assembled precision is not positive definite "
                f"(smallest eigenvalue estimate: {exc.min_eigenvalue})",
                min_eigenvalue=exc.min_eigenvalue) from exc
    return q


def export_precision(path, q, comment="spde precision"):
    """Debug export of Q in matrix-market text format."""
    export_matrix_market(path, q, comment=comment)
