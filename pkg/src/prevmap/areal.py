"""Discrete-space smoothing of area-level direct estimates.

The classic two-component convolution model: an intrinsic CAR term with
precision proportional to (degree - adjacency) plus an unstructured iid
term, fitted with the latent Gaussian engine's Gaussian observation stage
since the logit-scale direct estimates arrive with fixed, known variances.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .inference import (GaussianObs, LatentComponent, LatentModel,
                        fit_latent_model)

__all__ = [
    "AdjacencyGraph",
    "BymModel",
    "BymFit",
    "icar_precision",
    "fit_bym",
    "adjacency_from_csv",
    "adjacency_from_polygons",
    "write_adjacency_csv",
]

_ICAR_JITTER = 1e-8


@dataclass
class AdjacencyGraph:
    """Symmetric neighborhood structure over K areas."""

    n_areas: int
    edges: list  # list of (i, j) with i < j

    def __post_init__(self):
        seen = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError("self-loop in adjacency graph")
            if not (0 <= i < self.n_areas and 0 <= j < self.n_areas):
                raise ValueError("edge index out of range")
            seen.add((min(i, j), max(i, j)))
        self.edges = sorted(seen)

    def neighbors(self):
        nbr = [[] for _ in range(self.n_areas)]
        for i, j in self.edges:
            nbr[i].append(j)
            nbr[j].append(i)
        return nbr

    def adjacency(self):
        if not self.edges:
            return sp.csr_matrix((self.n_areas, self.n_areas))
        e = np.asarray(self.edges)
        data = np.ones(len(e))
        w = sp.coo_matrix((data, (e[:, 0], e[:, 1])),
                          shape=(self.n_areas, self.n_areas))
        return (w + w.T).tocsr()

    def component_labels(self):
        return sp.csgraph.connected_components(
            self.adjacency(), directed=False)[1]


def icar_precision(graph):
    """Intrinsic CAR structure matrix D - W (positive semidefinite)."""
    w = graph.adjacency()
    d = sp.diags(np.asarray(w.sum(axis=1)).ravel())
    return (d - w).tocsc()


@dataclass
class BymModel:
    """Direct estimates with fixed variances plus the smoothing structure."""

    y: np.ndarray
    v_hat: np.ndarray
    graph: AdjacencyGraph
    theta_init: tuple = (np.log(10.0), np.log(10.0))
    observed: np.ndarray = None  # mask; missing areas are predicted only

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.v_hat = np.asarray(self.v_hat, dtype=float)
        if self.observed is None:
            self.observed = np.isfinite(self.y) & np.isfinite(self.v_hat)
        self.observed = np.asarray(self.observed, dtype=bool)
        if np.any(self.v_hat[self.observed] <= 0):
            raise ValueError("v_hat must be positive for observed areas")
        if len(self.y) != self.graph.n_areas:
            raise ValueError("y length != number of areas")


@dataclass
class BymFit:
    """Posterior summaries of eta_k and p_k = expit(eta_k)."""

    fit: object
    eta_mean: np.ndarray
    eta_sd: np.ndarray
    eta_q025: np.ndarray
    eta_q50: np.ndarray
    eta_q975: np.ndarray
    p_mean: np.ndarray
    p_q025: np.ndarray
    p_q50: np.ndarray
    p_q975: np.ndarray
    singleton_areas: list = field(default_factory=list)


def _build_latent_model(model):
    k = model.graph.n_areas
    obs_ix = np.where(model.observed)[0]
    n = len(obs_ix)
    labels = model.graph.component_labels()
    comp_sizes = np.bincount(labels)
    singletons = np.where(comp_sizes[labels] == 1)[0]
    icar_cols = np.array([i for i in range(k) if i not in set(singletons)],
                         dtype=int)

    q_struct = icar_precision(model.graph)
    comps = []
    if len(icar_cols):
        qs = q_struct[np.ix_(icar_cols, icar_cols)].tocsc()
        jit = sp.identity(len(icar_cols), format="csc") * _ICAR_JITTER
        in_icar = np.isin(obs_ix, icar_cols)
        rows = np.where(in_icar)[0]
        cols = np.searchsorted(icar_cols, obs_ix[in_icar])
        design_s = sp.csr_matrix((np.ones(len(rows)), (rows, cols)),
                                 shape=(n, len(icar_cols)))
        # one sum-to-zero row per connected component of size >= 2
        con_rows = []
        for comp_label in np.unique(labels[icar_cols]):
            row = np.zeros(len(icar_cols))
            row[labels[icar_cols] == comp_label] = 1.0
            con_rows.append(row)
        comps.append(LatentComponent(
            name="icar",
            design=design_s,
            precision=lambda th, _qs=qs, _j=jit: np.exp(th[0]) * (_qs + _j),
            n_theta=1,
            theta_names=("log_icar_prec",),
            constraint=np.vstack(con_rows),
        ))
    comps.append(LatentComponent(
        name="iid",
        design=sp.csr_matrix((np.ones(n), (np.arange(n), obs_ix)), shape=(n, k)),
        precision=lambda th: sp.identity(k, format="csc") * np.exp(th[0]),
        n_theta=1,
        theta_names=("log_iid_prec",),
    ))
    lm = LatentModel(
        GaussianObs(model.y[obs_ix], model.v_hat[obs_ix]),
        comps,
        fixed_design=np.ones((n, 1)),
        fixed_names=["beta0_star"],
        theta_init=np.asarray(model.theta_init, dtype=float)[
            (0 if len(icar_cols) else 1):],
        meta={"icar_cols": icar_cols, "obs_ix": obs_ix,
              "singletons": sorted(int(s) for s in singletons)},
    )
    return lm


def _eta_operator(lm, k):
    """Sparse map from the latent vector to the K area-level eta values."""
    icar_cols = lm.meta["icar_cols"]
    d = lm.latent_dim
    rows, cols, vals = [], [], []
    if "icar" in lm.slices:
        s = lm.slices["icar"].start
        for pos, area in enumerate(icar_cols):
            rows.append(area)
            cols.append(s + pos)
            vals.append(1.0)
    s = lm.slices["iid"].start
    for area in range(k):
        rows.append(area)
        cols.append(s + area)
        vals.append(1.0)
    s = lm.slices["fixed"].start
    for area in range(k):
        rows.append(area)
        cols.append(s)
        vals.append(1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(k, d))


def fit_bym(model, thetas=None, num_quantile_samples=0, threads=None):
    """Fit the convolution smoothing model and summarize eta_k and p_k.

    The area-level eta_k = beta0* + S_k + eps_k is a linear combination of
    the latent vector, so its mixture marginals come from the per-theta
    Gaussian approximations directly; p_k quantiles follow by the monotone
    expit transform and the p_k mean by Gauss--Hermite integration.
    """
    lm = _build_latent_model(model)
    k = model.graph.n_areas
    fit = fit_latent_model(lm, thetas=thetas, threads=threads)
    op = _eta_operator(lm, k)

    weights = fit.weights
    mus = []
    sds = []
    for p in fit.points:
        approx = p.approx
        mu = op @ approx.mean
        cols = approx.factor.solve(np.asarray(op.todense()).T)
        var = np.einsum("kd,dk->k", op.toarray(), cols)
        if approx.constraint is not None:
            wm = approx._w @ approx._m
            ow = op @ approx._w
            owm = op @ wm
            var -= np.sum(owm * ow, axis=1)
        mus.append(mu)
        sds.append(np.sqrt(np.maximum(var, 1e-300)))
    mus = np.vstack(mus)
    sds = np.vstack(sds)
    mean = weights @ mus
    second = weights @ (sds ** 2 + mus ** 2)
    sd = np.sqrt(np.maximum(second - mean ** 2, 0.0))

    from .inference import _mixture_quantiles
    q = _mixture_quantiles(mus, sds, weights, (0.025, 0.5, 0.975))

    # E[expit(eta)] per area by Gauss-Hermite over each mixture component
    nodes, gh_w = np.polynomial.hermite_e.hermegauss(40)
    gh_w = gh_w / gh_w.sum()
    p_mean = np.zeros(k)
    for i in range(len(fit.points)):
        vals = expit(mus[i][:, None] + sds[i][:, None] * nodes)
        p_mean += weights[i] * (vals @ gh_w)

    return BymFit(
        fit=fit,
        eta_mean=mean, eta_sd=sd,
        eta_q025=q[0], eta_q50=q[1], eta_q975=q[2],
        p_mean=p_mean,
        p_q025=expit(q[0]), p_q50=expit(q[1]), p_q975=expit(q[2]),
        singleton_areas=lm.meta["singletons"],
    )


# ---------------------------------------------------------------------------
# adjacency ingestion
# ---------------------------------------------------------------------------

def adjacency_from_csv(path, area_ids):
    """Edge-list CSV (area_i, area_j) over string area identifiers."""
    index = {str(a): i for i, a in enumerate(area_ids)}
    edges = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            edges.append((index[str(row["area_i"])], index[str(row["area_j"])]))
    return AdjacencyGraph(n_areas=len(area_ids), edges=edges)


def adjacency_from_polygons(polygons, tol=1e-9):
    """Two polygons are adjacent when they share >= 2 boundary vertices."""
    keys = []
    for poly in polygons:
        s = set()
        for ring in poly.rings:
            for x, y in ring:
                s.add((round(x / tol), round(y / tol)))
        keys.append(s)
    edges = []
    for i in range(len(polygons)):
        for j in range(i + 1, len(polygons)):
            if len(keys[i] & keys[j]) >= 2:
                edges.append((i, j))
    return AdjacencyGraph(n_areas=len(polygons), edges=edges)


def write_adjacency_csv(path, graph, area_ids=None):
    ids = area_ids if area_ids is not None else list(range(graph.n_areas))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_i", "area_j"])
        for i, j in graph.edges:
            w.writerow([ids[i], ids[j]])
