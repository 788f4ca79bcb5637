"""Synthetic two-stage prevalence surveys over a Matern field.

The generator is deliberately independent of the mesh approximation under
test: point sets up to 5,000 locations are simulated exactly by dense
Cholesky of the Matern covariance, and the truth surface on the reporting
lattice comes from circulant embedding (exact stationary simulation on a
regular grid), with cluster values read off the same surface so that truth
and data share one realization.
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.fft import next_fast_len
from scipy.special import expit

from .errors import InvalidGeometryError
from .functionals import sample_points_in_polygon
from .spde import MaternParams, matern_cov, sigma_from_tau
from .survey import SurveyFrame, design_weights

__all__ = [
    "SimConfig",
    "SimOutput",
    "TruthLattice",
    "simulate_field",
    "lattice_field",
    "simulate_survey",
    "read_locations_csv",
    "read_household_size_csv",
    "write_truth_lattice_csv",
    "write_truth_areas_csv",
]


@dataclass
class SimConfig:
    """Parameters of the synthetic survey; defaults follow the simulation
    study this package reproduces."""

    beta0: float = float(np.log(0.07 / 0.93))
    tau: float = float(np.exp(-0.5))
    kappa: float = float(np.exp(0.5))
    nugget_var: float = 0.01
    n_clusters: int = 400
    total_psu: int = 46034
    households_per_ea: int = 100
    m_range: tuple = (4, 11)
    household_sizes: tuple = tuple(range(1, 13))
    household_size_probs: tuple = tuple([1.0 / 12] * 12)
    truth_resolution: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.nugget_var < 0 or self.tau <= 0 or self.kappa <= 0:
            raise ValueError("variance parameters must be positive")
        lo, hi = self.m_range
        if not (1 <= lo <= hi <= self.households_per_ea):
            raise ValueError("m_range must lie within 1..households_per_ea")
        p = np.asarray(self.household_size_probs, dtype=float)
        if len(p) != len(self.household_sizes) or abs(p.sum() - 1) > 1e-9:
            raise ValueError("household size distribution must sum to 1")

    @property
    def sigma2(self):
        return sigma_from_tau(self.tau, self.kappa, 1.0)

    def matern(self):
        return MaternParams(sigma2=self.sigma2, kappa=self.kappa, nu=1.0)


@dataclass
class TruthLattice:
    x: np.ndarray
    y: np.ndarray
    field: np.ndarray          # (ny, nx) field values S
    prevalence: np.ndarray     # (ny, nx), NaN outside the boundary
    inside: np.ndarray         # (ny, nx) bool


@dataclass
class SimOutput:
    frame: SurveyFrame
    cluster_field: np.ndarray
    truth: TruthLattice
    area_truth: dict           # area id -> true T_k
    config: SimConfig


def simulate_field(locations, params, seed=None, rng=None, mesh=None):
    """Exact Matern field values at arbitrary locations.

    Up to 5,000 locations use dense Cholesky of the covariance matrix;
    larger sets require a mesh and go through the sparse SPDE route.
    Coincident locations get a 1e-8 diagonal jitter with a warning.
    """
    pts = np.atleast_2d(np.asarray(locations, dtype=float))
    if rng is None:
        rng = np.random.default_rng(seed)
    n = len(pts)
    if n > 5000:
        if mesh is None:
            raise ValueError("more than 5000 locations: pass a mesh for the "
                             "sparse route")
        return _mesh_field(pts, params, rng, mesh)
    d = np.hypot(pts[:, 0][:, None] - pts[:, 0][None, :],
                 pts[:, 1][:, None] - pts[:, 1][None, :])
    cov = matern_cov(d, params)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        warnings.warn("covariance not positive definite (duplicate "
                      "locations?); adding 1e-8 jitter", stacklevel=2)
        chol = np.linalg.cholesky(cov + 1e-8 * np.eye(n))
    return chol @ rng.standard_normal(n)


def _mesh_field(pts, params, rng, mesh):
    from .geometry import fem_matrices, project
    from .spde import SpdeTheta, assemble_precision, tau_from_sigma
    from .sparsela import SparseCholesky

    c, g = fem_matrices(mesh)
    tau = tau_from_sigma(params.sigma2, params.kappa, params.nu)
    q = assemble_precision(c, g, SpdeTheta(np.log(tau), np.log(params.kappa)),
                           check=False)
    w = SparseCholesky(q).sample(rng.standard_normal(mesh.num_vertices))
    return project(mesh, pts).matrix @ w


def lattice_field(xs, ys, params, rng, pad_ranges=4.0, max_grow=3):
    """Stationary Matern field on a regular lattice by circulant embedding.

    Returns an array of shape (len(ys), len(xs)).  The torus is padded by
    ``pad_ranges`` practical ranges; on an indefinite embedding the padding
    doubles up to ``max_grow`` times before small negative eigenvalues are
    clipped with a warning.
    """
    hx = float(xs[1] - xs[0]) if len(xs) > 1 else 1.0
    hy = float(ys[1] - ys[0]) if len(ys) > 1 else 1.0
    nx, ny = len(xs), len(ys)
    rng_len = np.sqrt(8.0 * params.nu) / params.kappa
    pad = pad_ranges
    for attempt in range(max_grow + 1):
        mx = next_fast_len(nx + int(np.ceil(pad * rng_len / hx)), real=True)
        my = next_fast_len(ny + int(np.ceil(pad * rng_len / hy)), real=True)
        dx = np.minimum(np.arange(mx), mx - np.arange(mx)) * hx
        dy = np.minimum(np.arange(my), my - np.arange(my)) * hy
        cov = matern_cov(np.hypot(dx[:, None], dy[None, :]), params)
        lam = np.fft.fft2(cov).real
        if lam.min() >= -1e-9 * lam.max():
            break
        pad *= 2
    else:
        warnings.warn("circulant embedding not nonnegative definite; "
                      "clipping eigenvalues", stacklevel=2)
    lam = np.maximum(lam, 0.0)
    z = rng.standard_normal((mx, my)) + 1j * rng.standard_normal((mx, my))
    f = np.fft.ifft2(np.fft.fft2(z) * np.sqrt(lam / (mx * my)))
    # real part is one exact field; transpose to (ny, nx)
    return (np.real(f) * np.sqrt(mx * my))[:nx, :ny].T


def _bilinear(xs, ys, grid, pts):
    """Bilinear interpolation of grid (ny, nx) at pts; clamped to the edge."""
    fx = np.clip((pts[:, 0] - xs[0]) / (xs[1] - xs[0]), 0, len(xs) - 1 - 1e-12)
    fy = np.clip((pts[:, 1] - ys[0]) / (ys[1] - ys[0]), 0, len(ys) - 1 - 1e-12)
    ix = fx.astype(int)
    iy = fy.astype(int)
    tx = fx - ix
    ty = fy - iy
    return ((1 - tx) * (1 - ty) * grid[iy, ix]
            + tx * (1 - ty) * grid[iy, ix + 1]
            + (1 - tx) * ty * grid[iy + 1, ix]
            + tx * ty * grid[iy + 1, ix + 1])


def simulate_survey(config, boundary, areas=None, cluster_locations=None):
    """Generate a full synthetic survey plus its truth surfaces.

    Cluster locations default to uniform draws in the boundary polygon.
    Households per cluster are uniform on the configured range, member
    counts follow the household-size distribution, and outcomes are
    binomial with logit p = beta0 + S_i + eps_ij.  Design weights are the
    two-stage reciprocals.  The truth lattice (default 200 x 200 over the
    boundary bbox) carries the same field realization used for clusters.
    """
    if boundary.area() <= 0:
        raise InvalidGeometryError("boundary polygon must have positive area")
    rng = np.random.default_rng(config.seed)
    params = config.matern()

    res = config.truth_resolution
    x0, y0, x1, y1 = boundary.bbox()
    xs = np.linspace(x0, x1, res)
    ys = np.linspace(y0, y1, res)
    field = lattice_field(xs, ys, params, rng)

    if cluster_locations is None:
        locs = sample_points_in_polygon(boundary, config.n_clusters, rng)
    else:
        locs = np.atleast_2d(np.asarray(cluster_locations, dtype=float))
    n_cl = len(locs)
    s_cluster = _bilinear(xs, ys, field, locs)

    m_lo, m_hi = config.m_range
    m_i = rng.integers(m_lo, m_hi + 1, size=n_cl)
    hh_cluster = np.repeat(np.arange(n_cl), m_i)
    n_households = int(m_i.sum())
    sizes = rng.choice(np.asarray(config.household_sizes), size=n_households,
                       p=np.asarray(config.household_size_probs))
    eps = rng.normal(0.0, np.sqrt(config.nugget_var), size=n_households) \
        if config.nugget_var > 0 else np.zeros(n_households)
    p_ij = expit(config.beta0 + s_cluster[hh_cluster] + eps)
    y_ij = rng.binomial(sizes.astype(int), p_ij)
    weights = design_weights(n_cl, config.total_psu, m_i[hh_cluster],
                             config.households_per_ea)

    if areas:
        area_of_cluster = np.full(n_cl, "-1", dtype=object)
        for poly in areas:
            hit = poly.contains(locs) & (area_of_cluster == "-1")
            area_of_cluster[hit] = poly.id
        area_ids = area_of_cluster[hh_cluster]
    else:
        area_ids = np.zeros(n_households, dtype=int)

    hh_index = np.concatenate([np.arange(m) for m in m_i])
    frame = SurveyFrame(
        cluster_id=hh_cluster,
        area_id=np.asarray(area_ids),
        x=locs[hh_cluster, 0],
        y=locs[hh_cluster, 1],
        household_id=hh_index,
        n_members=sizes,
        positives=y_ij,
        weight=weights,
    )

    grid_pts = np.column_stack([np.meshgrid(xs, ys)[0].ravel(),
                                np.meshgrid(xs, ys)[1].ravel()])
    inside = boundary.contains(grid_pts).reshape(res, res)
    prevalence = expit(config.beta0 + field)
    prev_masked = np.where(inside, prevalence, np.nan)
    truth = TruthLattice(x=xs, y=ys, field=field, prevalence=prev_masked,
                         inside=inside)

    area_truth = {}
    if areas:
        for poly in areas:
            in_area = poly.contains(grid_pts).reshape(res, res)
            if in_area.any():
                area_truth[poly.id] = float(prevalence[in_area].mean())
    return SimOutput(frame=frame, cluster_field=s_cluster, truth=truth,
                     area_truth=area_truth, config=config)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def read_locations_csv(path):
    pts = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pts.append((float(row["x"]), float(row["y"])))
    return np.asarray(pts)


def read_household_size_csv(path):
    sizes, probs = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sizes.append(int(row["size"]))
            probs.append(float(row["probability"]))
    return tuple(sizes), tuple(probs)


def write_truth_lattice_csv(path, truth):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "field", "prevalence", "inside"])
        for j, yv in enumerate(truth.y):
            for i, xv in enumerate(truth.x):
                w.writerow([repr(float(xv)), repr(float(yv)),
                            repr(float(truth.field[j, i])),
                            repr(float(truth.prevalence[j, i])),
                            int(truth.inside[j, i])])


def write_truth_areas_csv(path, area_truth):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "t_true"])
        for aid in area_truth:
            w.writerow([aid, repr(float(area_truth[aid]))])
