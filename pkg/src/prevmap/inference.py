"""Latent Gaussian model engine.

Fits models of the form

    y_i ~ Binomial(N_i, expit(eta_i))   or   y_i ~ N(eta_i, V_i)
    eta = B u,   u ~ N(0, Q_prior(theta)^{-1})

by a Gaussian approximation at the conditional mode (Newton with
step-halving), a small grid over the hyperparameters theta weighted by the
Laplace evidence, and joint sampling from the resulting mixture of sparse
Gaussians.  Linear equality constraints (sum-to-zero terms) are enforced by
conditioning by kriging.
"""

import csv
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import expit, gammaln, ndtr

from .errors import ConvergenceError
from .sparsela import SparseCholesky

__all__ = [
    "GaussianObs",
    "BinomialObs",
    "LatentComponent",
    "LatentModel",
    "GaussianApprox",
    "HyperPoint",
    "FitResult",
    "JointSamples",
    "gaussian_approx",
    "hyper_grid",
    "fit_latent_model",
    "marginals",
    "sample_joint",
    "make_spde_model",
    "write_fit_summary_csv",
    "write_theta_grid_csv",
]

_DENSE_CUTOFF = 2500  # latent size below which marginal variances go dense


# ---------------------------------------------------------------------------
# observation stages
# ---------------------------------------------------------------------------

@dataclass
class GaussianObs:
    """Gaussian stage with fixed, known variances."""

    y: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.variance = np.broadcast_to(
            np.asarray(self.variance, dtype=float), self.y.shape).copy()
        if np.any(self.variance <= 0):
            raise ValueError("observation variances must be positive")

    def loglik(self, eta):
        r = self.y - eta
        return float(np.sum(-0.5 * (r * r / self.variance
                                    + np.log(2 * np.pi * self.variance))))

    def grad(self, eta):
        return (self.y - eta) / self.variance

    def neg_hess(self, eta):
        return 1.0 / self.variance

    @property
    def n(self):
        return len(self.y)


@dataclass
class BinomialObs:
    """Binomial counts with a logit link."""

    y: np.ndarray
    n_trials: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.n_trials = np.broadcast_to(
            np.asarray(self.n_trials, dtype=float), self.y.shape).copy()
        if np.any(self.y < 0) or np.any(self.y > self.n_trials):
            raise ValueError("need 0 <= y <= n_trials")

    def loglik(self, eta):
        const = gammaln(self.n_trials + 1) - gammaln(self.y + 1) \
            - gammaln(self.n_trials - self.y + 1)
        return float(np.sum(const + self.y * eta
                            - self.n_trials * np.logaddexp(0.0, eta)))

    def grad(self, eta):
        return self.y - self.n_trials * expit(eta)

    def neg_hess(self, eta):
        p = expit(eta)
        h = self.n_trials * p * (1.0 - p)
        if np.any(h < 1e-12):
            warnings.warn("binomial curvature clamped at 1e-12", stacklevel=2)
            h = np.maximum(h, 1e-12)
        return h

    @property
    def n(self):
        return len(self.y)


# ---------------------------------------------------------------------------
# model description
# ---------------------------------------------------------------------------

@dataclass
class LatentComponent:
    """One additive term of the linear predictor.

    ``design`` maps the component's coefficients to observations and
    ``precision`` builds the prior precision from the component's block of
    theta (a plain sparse matrix is accepted for theta-free components).
    ``constraint`` rows, if given, are enforced as exact zero sums.
    """

    name: str
    design: sp.spmatrix
    precision: object
    n_theta: int = 0
    theta_names: tuple = ()
    constraint: np.ndarray = None

    @property
    def size(self):
        return self.design.shape[1]

    def prior_precision(self, theta_block):
        if callable(self.precision):
            return sp.csc_matrix(self.precision(theta_block))
        return sp.csc_matrix(self.precision)


class LatentModel:
    """Observation stage plus linear predictor layout and priors.

    The latent vector is the concatenation of the component coefficient
    blocks followed by the fixed effects (intercept and covariates), which
    carry an exchangeable Gaussian prior with precision ``fixed_prec``.
    Hyperparameters get independent Gaussian priors centered at
    ``theta_init`` with standard deviation ``theta_prior_sd``.
    """

    def __init__(self, obs, components, fixed_design=None, fixed_names=None,
                 fixed_prec=1e-3, theta_init=None, theta_prior_sd=1.5,
                 meta=None):
        self.obs = obs
        self.components = list(components)
        n = obs.n
        for comp in self.components:
            if comp.design.shape[0] != n:
                raise ValueError(f"component {comp.name}: design rows != n_obs")
        if fixed_design is not None:
            fixed_design = np.atleast_2d(np.asarray(fixed_design, dtype=float))
            if fixed_design.shape[0] != n:
                raise ValueError("fixed_design rows != n_obs")
        self.fixed_design = fixed_design
        self.fixed_prec = float(fixed_prec)
        p = 0 if fixed_design is None else fixed_design.shape[1]
        if fixed_names is None:
            fixed_names = ["beta0"] + [f"beta{j}" for j in range(1, p)]
        self.fixed_names = list(fixed_names)[:p]

        sizes = [c.size for c in self.components] + [p]
        offsets = np.cumsum([0] + sizes)
        self.slices = {}
        for i, comp in enumerate(self.components):
            self.slices[comp.name] = slice(offsets[i], offsets[i + 1])
        self.slices["fixed"] = slice(offsets[-2], offsets[-1])
        self.latent_dim = int(offsets[-1])

        self.n_theta = sum(c.n_theta for c in self.components)
        if theta_init is None:
            theta_init = np.zeros(self.n_theta)
        self.theta_init = np.asarray(theta_init, dtype=float)
        if len(self.theta_init) != self.n_theta:
            raise ValueError("theta_init length mismatch")
        self.theta_prior_sd = np.broadcast_to(
            np.asarray(theta_prior_sd, dtype=float), (self.n_theta,)).copy()
        self.meta = dict(meta or {})

        blocks = [sp.csr_matrix(c.design) for c in self.components]
        if p:
            blocks.append(sp.csr_matrix(fixed_design))
        self.design = sp.hstack(blocks).tocsr() if blocks else None

        rows = []
        for i, comp in enumerate(self.components):
            if comp.constraint is None:
                continue
            a = np.atleast_2d(np.asarray(comp.constraint, dtype=float))
            full = np.zeros((a.shape[0], self.latent_dim))
            full[:, self.slices[comp.name]] = a
            rows.append(full)
        self.constraint = np.vstack(rows) if rows else None

        self.theta_names = []
        for comp in self.components:
            names = comp.theta_names or tuple(
                f"{comp.name}.theta{j}" for j in range(comp.n_theta))
            self.theta_names.extend(names)

    def coord_names(self):
        names = []
        for comp in self.components:
            names.extend(f"{comp.name}[{i}]" for i in range(comp.size))
        names.extend(self.fixed_names)
        return names

    def theta_blocks(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = {}
        k = 0
        for comp in self.components:
            out[comp.name] = theta[k:k + comp.n_theta]
            k += comp.n_theta
        return out

    def prior_precision(self, theta):
        blocks = self.theta_blocks(theta)
        mats = [c.prior_precision(blocks[c.name]) for c in self.components]
        p = 0 if self.fixed_design is None else self.fixed_design.shape[1]
        if p:
            mats.append(sp.identity(p, format="csc") * self.fixed_prec)
        return sp.block_diag(mats, format="csc")

    def log_theta_prior(self, theta):
        z = (np.asarray(theta) - self.theta_init) / self.theta_prior_sd
        return float(np.sum(-0.5 * z * z - np.log(self.theta_prior_sd)
                            - 0.5 * np.log(2 * np.pi)))


# ---------------------------------------------------------------------------
# Gaussian approximation at the conditional mode
# ---------------------------------------------------------------------------

@dataclass
class GaussianApprox:
    """Gaussian matched to value and curvature of the conditional posterior."""

    theta: np.ndarray
    mean: np.ndarray            # constraint-corrected mean
    precision: sp.spmatrix
    factor: SparseCholesky
    log_evidence: float
    n_iter: int
    constraint: np.ndarray = None
    _w: np.ndarray = None       # Q^{-1} A^T
    _m: np.ndarray = None       # (A Q^{-1} A^T)^{-1}
    _marg_var: dict = field(default_factory=dict)

    def correct_samples(self, s):
        """Apply the kriging correction to zero-mean draws s (d, k)."""
        if self.constraint is None:
            return s
        return s - self._w @ (self._m @ (self.constraint @ s))

    def marginal_variance(self, indices):
        """Posterior variances of selected latent coordinates."""
        key = (int(indices[0]), int(indices[-1]), len(indices))
        if key in self._marg_var:
            return self._marg_var[key]
        d = self.factor.n
        out = np.empty(len(indices))
        chunk = max(1, min(len(indices), _DENSE_CUTOFF))
        for s in range(0, len(indices), chunk):
            ix = np.asarray(indices[s:s + chunk], dtype=int)
            cols = self.factor.solve_columns(ix)
            out[s:s + chunk] = cols[ix, np.arange(len(ix))]
            if self.constraint is not None:
                wm = self._w @ self._m
                out[s:s + chunk] -= np.sum(
                    wm[ix] * self._w[ix], axis=1)
        self._marg_var[key] = out
        return out


def _loglik_terms(obs, eta):
    return obs.loglik(eta), obs.grad(eta), obs.neg_hess(eta)


def gaussian_approx(model, theta, max_iter=100, tol=1e-8, max_halvings=30):
    """Newton--Raphson Gaussian approximation of pi(u | y, theta).

    Returns the (constrained) mode, the sparse posterior precision at the
    mode and the Laplace log-evidence log pi(y | theta).  With a Gaussian
    observation stage the first Newton step is exact.
    """
    theta = np.asarray(theta, dtype=float)
    q_prior = model.prior_precision(theta)
    prior_factor = SparseCholesky(q_prior)
    b = model.design
    a_con = model.constraint
    d = model.latent_dim
    u = np.zeros(d)

    def objective(u_):
        eta = b @ u_
        return model.obs.loglik(eta) - 0.5 * float(u_ @ (q_prior @ u_))

    f_u = objective(u)
    trace = [f_u]
    factor = None
    q_post = None
    n_iter = 0
    converged = False
    w_mat = m_mat = None
    for it in range(max_iter):
        eta = b @ u
        g = model.obs.grad(eta)
        h = model.obs.neg_hess(eta)
        q_post = (q_prior + (b.T.multiply(h) @ b)).tocsc()
        q_post = ((q_post + q_post.T) * 0.5).tocsc()
        factor = SparseCholesky(q_post)
        if a_con is not None:
            w_mat = factor.solve(a_con.T)
            m_mat = np.linalg.inv(a_con @ w_mat)
        grad = np.asarray(b.T @ g).ravel() - q_prior @ u
        if a_con is not None:
            # projected gradient: remove the constrained directions
            grad_proj = grad - a_con.T @ np.linalg.solve(
                a_con @ a_con.T, a_con @ grad)
        else:
            grad_proj = grad
        if np.max(np.abs(grad_proj)) < tol * (1.0 + abs(f_u)):
            converged = True
            break
        delta = factor.solve(grad)
        step = 1.0
        improved = False
        for _ in range(max_halvings):
            u_try = u + step * delta
            if a_con is not None:
                u_try = u_try - w_mat @ (m_mat @ (a_con @ u_try))
            f_try = objective(u_try)
            if f_try >= f_u - 1e-12 * (1 + abs(f_u)):
                improved = True
                break
            step *= 0.5
        if not improved:
            raise ConvergenceError(
                f"Newton line search failed at iteration {it}", trace=trace)
        rel_change = np.max(np.abs(u_try - u)) / (1.0 + np.max(np.abs(u_try)))
        u = u_try
        f_u = f_try
        trace.append(f_u)
        n_iter = it + 1
        if rel_change < tol:
            converged = True
            # refresh curvature at the accepted mode
            eta = b @ u
            h = model.obs.neg_hess(eta)
            q_post = (q_prior + (b.T.multiply(h) @ b)).tocsc()
            q_post = ((q_post + q_post.T) * 0.5).tocsc()
            factor = SparseCholesky(q_post)
            if a_con is not None:
                w_mat = factor.solve(a_con.T)
                m_mat = np.linalg.inv(a_con @ w_mat)
            break
    if not converged:
        raise ConvergenceError(
            f"Gaussian approximation did not converge in {max_iter} "
            f"iterations", trace=trace)

    # unconstrained mean of the final quadratic model
    eta = b @ u
    g = model.obs.grad(eta)
    grad = np.asarray(b.T @ g).ravel() - q_prior @ u
    mu_hat = u + factor.solve(grad)

    loglik_mode = model.obs.loglik(eta)
    log_ev = (loglik_mode
              + 0.5 * prior_factor.logdet
              - 0.5 * float(u @ (q_prior @ u))
              - 0.5 * factor.logdet)
    mean = mu_hat
    if a_con is not None:
        s_prior = a_con @ prior_factor.solve(a_con.T)
        s_post = a_con @ w_mat
        a_mu = a_con @ mu_hat
        diff = u - mu_hat
        log_ev += (0.5 * np.linalg.slogdet(s_prior)[1]
                   - 0.5 * np.linalg.slogdet(s_post)[1]
                   - 0.5 * float(a_mu @ np.linalg.solve(s_post, a_mu))
                   + 0.5 * float(diff @ (q_post @ diff)))
        mean = mu_hat - w_mat @ (m_mat @ a_mu)

    return GaussianApprox(theta=theta, mean=mean, precision=q_post,
                          factor=factor, log_evidence=log_ev, n_iter=n_iter,
                          constraint=a_con, _w=w_mat, _m=m_mat)


# ---------------------------------------------------------------------------
# hyperparameter grid
# ---------------------------------------------------------------------------

@dataclass
class HyperPoint:
    theta: np.ndarray
    log_post: float
    weight: float
    approx: GaussianApprox


def _ccd_offsets(dim, step):
    """Central composite layout: center, axial at +-step and +-2 step,
    and the 2^dim factorial corners at +-step."""
    pts = [np.zeros(dim)]
    for j in range(dim):
        for s in (-2 * step, -step, step, 2 * step):
            v = np.zeros(dim)
            v[j] = s
            pts.append(v)
    if dim > 1:
        from itertools import product
        for signs in product((-1.0, 1.0), repeat=dim):
            pts.append(step * np.asarray(signs))
    return np.unique(np.round(np.vstack(pts), 12), axis=0)


def _grid_offsets(dim, step):
    from itertools import product
    axis = np.array([-2 * step, -step, 0.0, step, 2 * step])
    return np.array(list(product(axis, repeat=dim)))


def hyper_grid(model, center=None, strategy="ccd", step=0.75, optimize=True,
               threads=None, nm_maxfev=None):
    """Evaluate the hyperparameter posterior on a mode-centered grid.

    Locates the theta mode with Nelder--Mead on the Laplace evidence plus
    prior (falling back to ``center``/``theta_init`` with a warning on
    optimizer failure), then evaluates log pi~(theta | y) on a central
    composite (default) or full tensor grid and normalizes the weights.
    """
    dim = model.n_theta
    if center is None:
        center = model.theta_init.copy()
    center = np.asarray(center, dtype=float)

    def log_post(theta):
        approx = gaussian_approx(model, theta)
        return approx.log_evidence + model.log_theta_prior(theta), approx

    if dim == 0:
        lp, approx = log_post(np.empty(0))
        return [HyperPoint(np.empty(0), lp, 1.0, approx)]

    if optimize:
        res = minimize(lambda t: -log_post(t)[0], center,
                       method="Nelder-Mead",
                       options=dict(xatol=0.02, fatol=0.02,
                                    maxfev=nm_maxfev or 80 * dim))
        if res.success or np.all(np.isfinite(res.x)):
            if not res.success:
                warnings.warn("theta mode search did not fully converge; "
                              "using best point found", stacklevel=2)
            center = res.x
        else:
            warnings.warn("theta mode search failed; using supplied center",
                          stacklevel=2)

    offsets = (_ccd_offsets(dim, step) if strategy == "ccd"
               else _grid_offsets(dim, step))
    thetas = center[None, :] + offsets

    if threads is None:
        threads = int(os.environ.get("PREVMAP_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(log_post, thetas))
    else:
        results = [log_post(t) for t in thetas]

    lps = np.array([r[0] for r in results])
    w = np.exp(lps - lps.max())
    w /= w.sum()
    return [HyperPoint(thetas[i], float(lps[i]), float(w[i]), results[i][1])
            for i in range(len(thetas))]


# ---------------------------------------------------------------------------
# fit container, marginals, sampling
# ---------------------------------------------------------------------------

@dataclass
class MarginalSummaries:
    names: list
    mean: np.ndarray
    sd: np.ndarray
    q025: np.ndarray
    q50: np.ndarray
    q975: np.ndarray


@dataclass
class FitResult:
    model: LatentModel
    points: list
    meta: dict = field(default_factory=dict)
    _marginals: dict = field(default_factory=dict)

    @property
    def weights(self):
        return np.array([p.weight for p in self.points])

    def thetas(self):
        return np.vstack([p.theta for p in self.points]) \
            if self.points[0].theta.size else np.empty((len(self.points), 0))


def fit_latent_model(model, thetas=None, strategy="ccd", step=0.75,
                     optimize=True, threads=None):
    """Fit the model: hyperparameter grid with attached Gaussian approximations.

    ``thetas`` may give explicit grid points (list of vectors) to skip the
    mode search, e.g. a single point for a fixed-theta fit.
    """
    if thetas is not None:
        pts = []
        lps = []
        for t in thetas:
            t = np.asarray(t, dtype=float)
            approx = gaussian_approx(model, t)
            lps.append(approx.log_evidence + model.log_theta_prior(t))
            pts.append(approx)
        lps = np.array(lps)
        w = np.exp(lps - lps.max())
        w /= w.sum()
        points = [HyperPoint(np.asarray(t, dtype=float), float(lp), float(wi), a)
                  for t, lp, wi, a in zip(thetas, lps, w, pts)]
    else:
        points = hyper_grid(model, strategy=strategy, step=step,
                            optimize=optimize, threads=threads)
    return FitResult(model=model, points=points)


def _mixture_quantiles(mus, sds, weights, probs, tol=1e-8):
    """Quantiles of a Gaussian mixture by bisection of the CDF.

    mus, sds: (k, m) component parameters per coordinate; weights: (k,).
    Returns an array of shape (len(probs), m).
    """
    k, m = mus.shape
    lo = np.min(mus - 12 * sds, axis=0)
    hi = np.max(mus + 12 * sds, axis=0)
    out = np.empty((len(probs), m))
    w = weights[:, None]
    for pi, p in enumerate(probs):
        a, bnd = lo.copy(), hi.copy()
        for _ in range(200):
            mid = 0.5 * (a + bnd)
            cdf = np.sum(w * ndtr((mid[None, :] - mus) / sds), axis=0)
            high = cdf >= p
            bnd = np.where(high, mid, bnd)
            a = np.where(high, a, mid)
            if np.max(bnd - a) < tol:
                break
        out[pi] = 0.5 * (a + bnd)
    return out


def marginals(fit, coords=None):
    """Mixture-of-Gaussians marginal mean, sd and quantiles per coordinate."""
    model = fit.model
    if coords is None:
        coords = np.arange(model.latent_dim)
    coords = np.asarray(coords, dtype=int)
    key = coords.tobytes()
    if key in fit._marginals:
        return fit._marginals[key]
    weights = fit.weights
    mus = np.vstack([p.approx.mean[coords] for p in fit.points])
    sds = np.sqrt(np.vstack([p.approx.marginal_variance(coords)
                             for p in fit.points]))
    mean = weights @ mus
    second = weights @ (sds ** 2 + mus ** 2)
    sd = np.sqrt(np.maximum(second - mean ** 2, 0.0))
    q = _mixture_quantiles(mus, sds, weights, (0.025, 0.5, 0.975))
    names = [fit.model.coord_names()[i] for i in coords]
    res = MarginalSummaries(names=names, mean=mean, sd=sd,
                            q025=q[0], q50=q[1], q975=q[2])
    fit._marginals[key] = res
    return res


@dataclass
class JointSamples:
    """Joint posterior draws: rows are samples over the full latent vector."""

    samples: np.ndarray
    theta_index: np.ndarray
    coord_names: list

    @property
    def num_samples(self):
        return self.samples.shape[0]


def sample_joint(fit, num_samples, seed):
    """Sample theta from the grid weights, then the latent field given theta.

    Deterministic under a fixed seed: theta indices are drawn first, then
    standard normal blocks per grid point in index order.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    rng = np.random.default_rng(seed)
    k = len(fit.points)
    idx = rng.choice(k, size=num_samples, p=fit.weights)
    d = fit.model.latent_dim
    out = np.empty((num_samples, d))
    for j in range(k):
        sel = np.where(idx == j)[0]
        if len(sel) == 0:
            continue
        approx = fit.points[j].approx
        z = rng.standard_normal((d, len(sel)))
        s = approx.factor.sample(z)
        s = approx.correct_samples(s)
        out[sel] = (approx.mean[:, None] + s).T
    return JointSamples(samples=out, theta_index=idx,
                        coord_names=fit.model.coord_names())


# ---------------------------------------------------------------------------
# convenience builder for the geostatistical model
# ---------------------------------------------------------------------------

def make_spde_model(obs, projector, c_mat, g_mat, mesh=None, nugget=True,
                    covariates=None, intercept=True, theta_init=None,
                    fixed_prec=1e-3, theta_prior_sd=1.5):
    """Binomial/Gaussian observations driven by an SPDE field.

    eta = beta0 + Z beta + (A w) + eps with A the mesh projector at the data
    locations, w the field weights with SPDE precision Q(log tau, log kappa)
    and eps an optional iid nugget whose log-precision is a hyperparameter.
    """
    from .spde import assemble_precision, SpdeTheta

    a = projector.matrix if hasattr(projector, "matrix") else sp.csr_matrix(projector)
    n = a.shape[0]
    comps = [LatentComponent(
        name="field",
        design=a,
        precision=lambda th: assemble_precision(
            c_mat, g_mat, SpdeTheta(th[0], th[1]), check=False),
        n_theta=2,
        theta_names=("log_tau", "log_kappa"),
    )]
    if nugget:
        comps.append(LatentComponent(
            name="eps",
            design=sp.identity(n, format="csr"),
            precision=lambda th: sp.identity(n, format="csc") * np.exp(th[0]),
            n_theta=1,
            theta_names=("log_nugget_prec",),
        ))
    cols = []
    names = []
    if intercept:
        cols.append(np.ones((n, 1)))
        names.append("beta0")
    if covariates is not None:
        z = np.atleast_2d(np.asarray(covariates, dtype=float))
        if z.shape[0] != n:
            z = z.T
        cols.append(z)
        names.extend(f"beta{j + 1}" for j in range(z.shape[1]))
    fixed = np.hstack(cols) if cols else None
    if theta_init is None:
        theta_init = [0.0, 0.0] + ([np.log(100.0)] if nugget else [])
    meta = {"mesh": mesh, "nugget": nugget}
    return LatentModel(obs, comps, fixed_design=fixed, fixed_names=names,
                       fixed_prec=fixed_prec, theta_init=theta_init,
                       theta_prior_sd=theta_prior_sd, meta=meta)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def write_fit_summary_csv(path, summaries):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["coordinate", "mean", "sd", "q025", "q50", "q975"])
        for i, name in enumerate(summaries.names):
            w.writerow([name,
                        repr(float(summaries.mean[i])),
                        repr(float(summaries.sd[i])),
                        repr(float(summaries.q025[i])),
                        repr(float(summaries.q50[i])),
                        repr(float(summaries.q975[i]))])


def write_theta_grid_csv(path, fit):
    names = fit.model.theta_names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + ["log_post", "weight"])
        for p in fit.points:
            w.writerow([repr(float(v)) for v in p.theta]
                       + [repr(float(p.log_post)), repr(float(p.weight))])
