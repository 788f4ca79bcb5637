"""Config-driven pipeline: simulate -> fit -> areas/excursions -> report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  All outputs are flat files under [paths] output_dir; identical
config + seed + thread count give byte-identical CSV and pixel-identical
PGM outputs.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import areal, functionals, render, simulate, survey
from .config import load_config
from .errors import (ConfigError, ConvergenceError, DataError,
                     InvalidGeometryError, NoDataError,
                     NotPositiveDefiniteError, PrevmapError, RefinementError)
from .geometry import (fem_matrices, project, read_polygons_csv,
                       read_polygons_geojson)
from .inference import (BinomialObs, fit_latent_model, make_spde_model,
                        marginals, sample_joint, write_fit_summary_csv,
                        write_theta_grid_csv)
from .meshing import build_mesh
from .spde import tau_from_sigma

__all__ = ["main", "cmd_simulate", "cmd_fit", "cmd_areas", "cmd_excursions",
           "cmd_report"]


def _read_polygons(path):
    if not os.path.exists(path):
        raise DataError(f"polygon file not found: {path}")
    if path.endswith(".csv"):
        return read_polygons_csv(path)
    return read_polygons_geojson(path)


def _boundary(cfg):
    polys = _read_polygons(cfg.boundary)
    if len(polys) != 1:
        raise DataError(f"boundary file must contain exactly one polygon, "
                        f"got {len(polys)}")
    return polys[0]


def _areas(cfg):
    if not cfg.areas:
        return None
    return _read_polygons(cfg.areas)


def _sim_config(cfg):
    sizes = tuple(range(1, 13))
    probs = tuple([1.0 / 12] * 12)
    if cfg.household_sizes:
        if not os.path.exists(cfg.household_sizes):
            raise DataError(f"household size file not found: "
                            f"{cfg.household_sizes}")
        sizes, probs = simulate.read_household_size_csv(cfg.household_sizes)
    return simulate.SimConfig(
        beta0=cfg.sim_beta0, tau=cfg.sim_tau, kappa=cfg.sim_kappa,
        nugget_var=cfg.sim_nugget_var, n_clusters=cfg.sim_n_clusters,
        total_psu=cfg.total_psu, households_per_ea=cfg.households_per_ea,
        m_range=(cfg.sim_m_min, cfg.sim_m_max),
        household_sizes=sizes, household_size_probs=probs,
        truth_resolution=cfg.sim_truth_resolution, seed=cfg.seed)


def cmd_simulate(cfg):
    boundary = _boundary(cfg)
    areas = _areas(cfg)
    locs = None
    if cfg.cluster_locations:
        if not os.path.exists(cfg.cluster_locations):
            raise DataError(f"cluster location file not found: "
                            f"{cfg.cluster_locations}")
        locs = simulate.read_locations_csv(cfg.cluster_locations)
    sim = simulate.simulate_survey(_sim_config(cfg), boundary, areas=areas,
                                   cluster_locations=locs)
    os.makedirs(cfg.output_dir, exist_ok=True)
    survey.write_frame_csv(cfg.out("frame.csv"), sim.frame)
    simulate.write_truth_lattice_csv(cfg.out("truth_lattice.csv"), sim.truth)
    if sim.area_truth:
        simulate.write_truth_areas_csv(cfg.out("truth_areas.csv"),
                                       sim.area_truth)
    cfg.echo(cfg.out("config_resolved.ini"))
    print(f"simulate: {sim.frame.num_households} households in "
          f"{len(np.unique(sim.frame.cluster_id))} clusters -> "
          f"{cfg.output_dir}")
    return 0


def _load_frame(cfg):
    path = cfg.data or cfg.out("frame.csv")
    if not os.path.exists(path):
        raise DataError(f"survey frame not found: {path} (run simulate or "
                        f"set paths.data)")
    return survey.read_frame_csv(path)


def _spde_theta_init(cfg):
    kappa0 = np.sqrt(8.0) / cfg.range_init
    tau0 = tau_from_sigma(cfg.sigma2_init, kappa0, 1.0)
    init = [float(np.log(tau0)), float(np.log(kappa0))]
    if cfg.nugget:
        init.append(float(np.log(1.0 / cfg.nugget_var_init)))
    return init


def cmd_fit(cfg):
    boundary = _boundary(cfg)
    frame = _load_frame(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    wrote = []

    if cfg.fit_spde:
        mesh = build_mesh(boundary, cfg.interior_max_edge,
                          cfg.extension_factor, cfg.exterior_max_edge)
        c_mat, g_mat = fem_matrices(mesh)
        locs = np.column_stack([frame.x, frame.y])
        proj = project(mesh, locs)
        obs = BinomialObs(frame.positives, frame.n_members)
        model = make_spde_model(obs, proj, c_mat, g_mat, mesh=mesh,
                                nugget=cfg.nugget,
                                theta_init=_spde_theta_init(cfg))
        fit = fit_latent_model(model, threads=cfg.threads)
        samples = sample_joint(fit, cfg.samples, seed=cfg.seed)

        write_theta_grid_csv(cfg.out("theta_grid.csv"), fit)
        fixed_ix = np.arange(model.slices["fixed"].start, model.latent_dim)
        marg = marginals(fit, coords=fixed_ix)
        write_fit_summary_csv(cfg.out("fit_summary.csv"), marg)

        spacing = cfg.grid_spacing
        grid = functionals.make_grid(boundary, spacing)
        w = samples.samples[:, model.slices["field"]]
        s_grid = (project(mesh, grid.points).matrix @ w.T)
        s_med = np.median(s_grid, axis=1)
        functionals.write_grid_csv(cfg.out("field_median_lattice.csv"),
                                   grid.points, mean=s_med)
        b0 = model.slices["fixed"].start + model.fixed_names.index("beta0")
        np.savez_compressed(
            cfg.out("fit_state.npz"),
            samples=samples.samples,
            theta_index=samples.theta_index,
            field_start=model.slices["field"].start,
            field_stop=model.slices["field"].stop,
            beta0_index=b0,
            mesh_vertices=mesh.vertices,
            mesh_triangles=mesh.triangles,
            mesh_interior=mesh.interior_flag,
        )
        wrote += ["theta_grid.csv", "fit_summary.csv",
                  "field_median_lattice.csv", "fit_state.npz"]

    if cfg.fit_bym:
        areas = _areas(cfg)
        if areas is None:
            raise DataError("paths.areas is required for the BYM path")
        ests = survey.direct_estimates(frame, fix_policy=cfg.fix_policy)
        order = {str(p.id): i for i, p in enumerate(areas)}
        y = np.full(len(areas), np.nan)
        v = np.full(len(areas), np.nan)
        for e in ests:
            key = str(e.area_id)
            if key in order:
                y[order[key]] = e.y_logit
                v[order[key]] = e.v_logit
        survey.write_direct_estimates_csv(cfg.out("direct_estimates.csv"),
                                          ests)
        if cfg.adjacency:
            graph = areal.adjacency_from_csv(cfg.adjacency,
                                             [p.id for p in areas])
        else:
            graph = areal.adjacency_from_polygons(areas)
        bym = areal.fit_bym(areal.BymModel(y=y, v_hat=v, graph=graph),
                            threads=cfg.threads)
        with open(cfg.out("bym_summary.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["area_id", "eta_mean", "eta_sd", "eta_q025",
                        "eta_q50", "eta_q975", "p_mean", "p_q025", "p_q50",
                        "p_q975", "singleton"])
            for i, poly in enumerate(areas):
                w.writerow([poly.id,
                            repr(float(bym.eta_mean[i])),
                            repr(float(bym.eta_sd[i])),
                            repr(float(bym.eta_q025[i])),
                            repr(float(bym.eta_q50[i])),
                            repr(float(bym.eta_q975[i])),
                            repr(float(bym.p_mean[i])),
                            repr(float(bym.p_q025[i])),
                            repr(float(bym.p_q50[i])),
                            repr(float(bym.p_q975[i])),
                            int(i in bym.singleton_areas)])
        write_theta_grid_csv(cfg.out("bym_theta_grid.csv"), bym.fit)
        wrote += ["direct_estimates.csv", "bym_summary.csv",
                  "bym_theta_grid.csv"]

    cfg.echo(cfg.out("config_resolved.ini"))
    print(f"fit: wrote {', '.join(wrote)} -> {cfg.output_dir}")
    return 0


def _load_state(cfg):
    path = cfg.out("fit_state.npz")
    if not os.path.exists(path):
        raise DataError(f"fit state not found: {path} (run fit first)")
    from .geometry import TriMesh
    from .inference import JointSamples

    z = np.load(path)
    mesh = TriMesh(z["mesh_vertices"], z["mesh_triangles"], z["mesh_interior"])
    spec = functionals.SurfaceSpec(
        mesh=mesh,
        field_slice=slice(int(z["field_start"]), int(z["field_stop"])),
        beta0_index=int(z["beta0_index"]))
    samples = JointSamples(samples=z["samples"],
                           theta_index=z["theta_index"], coord_names=[])
    return samples, spec


def cmd_areas(cfg):
    areas = _areas(cfg)
    if areas is None:
        raise DataError("paths.areas is required for area averages")
    samples, spec = _load_state(cfg)
    res = functionals.area_averages(samples, spec, areas,
                                    points_per_area=cfg.points_per_area,
                                    seed=cfg.seed)
    functionals.write_area_csv(cfg.out("area_averages.csv"), res)
    print(f"areas: {len(res.area_ids)} area averages -> "
          f"{cfg.out('area_averages.csv')}")
    return 0


def cmd_excursions(cfg):
    boundary = _boundary(cfg)
    samples, spec = _load_state(cfg)
    grid = functionals.make_grid(boundary, cfg.grid_spacing)
    eta, out = functionals._surface_matrix(samples, spec, grid.points)
    prev = 1.0 / (1.0 + np.exp(-eta))
    exc = functionals.simultaneous_excursions(
        samples, spec, grid.points, u=cfg.u, alpha_level=cfg.alpha_level)
    functionals.write_grid_csv(
        cfg.out("excursion_grid.csv"), grid.points,
        mean=prev.mean(axis=1), sd=prev.std(axis=1, ddof=1),
        exceed_prob=exc.exceed_prob, labels=exc.labels)
    n_above = int((exc.labels == "above").sum())
    n_below = int((exc.labels == "below").sum())
    n_ind = int((exc.labels == "indeterminate").sum())
    print(f"excursions: u={cfg.u} level={1 - cfg.alpha_level}: "
          f"{n_above} above, {n_below} below, {n_ind} indeterminate")
    return 0


def _read_grid_csv(path):
    if not os.path.exists(path):
        raise DataError(f"missing input: {path}")
    cols = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    for key in rows[0]:
        if key == "label":
            cols[key] = np.array([r[key] for r in rows])
        else:
            cols[key] = np.array([float(r[key]) for r in rows])
    return cols


def cmd_report(cfg):
    boundary = _boundary(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    wrote = []

    med_path = cfg.out("field_median_lattice.csv")
    if os.path.exists(med_path):
        cols = _read_grid_csv(med_path)
        grid = functionals.make_grid(boundary, cfg.grid_spacing)
        if grid.points.shape[0] != len(cols["mean"]):
            raise DataError("field_median_lattice.csv does not match the "
                            "configured grid spacing")
        render.svg_heatmap(cfg.out("median_field.svg"), grid, cols["mean"],
                           title="posterior median field")
        render.write_pgm(cfg.out("median_field.pgm"),
                         render.field_to_gray(grid.full(cols["mean"])))
        wrote += ["median_field.svg", "median_field.pgm"]

    area_path = cfg.out("area_averages.csv")
    areas = _areas(cfg)
    if os.path.exists(area_path) and areas:
        with open(area_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        vals = {r["area_id"]: float(r["mean"]) for r in rows}
        v = np.array([vals.get(str(p.id), np.nan) for p in areas])
        render.svg_choropleth(cfg.out("area_averages.svg"), areas, v,
                              title="area-average prevalence (SPDE)")
        wrote.append("area_averages.svg")
    bym_path = cfg.out("bym_summary.csv")
    if os.path.exists(bym_path) and areas:
        with open(bym_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        vals = {r["area_id"]: float(r["p_mean"]) for r in rows}
        v = np.array([vals.get(str(p.id), np.nan) for p in areas])
        render.svg_choropleth(cfg.out("bym_areas.svg"), areas, v,
                              title="area-average prevalence (BYM)")
        wrote.append("bym_areas.svg")
    truth_path = cfg.out("truth_areas.csv")
    if os.path.exists(truth_path) and areas:
        with open(truth_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        vals = {r["area_id"]: float(r["t_true"]) for r in rows}
        v = np.array([vals.get(str(p.id), np.nan) for p in areas])
        render.svg_choropleth(cfg.out("true_areas.svg"), areas, v,
                              title="true area-average prevalence")
        wrote.append("true_areas.svg")

    exc_path = cfg.out("excursion_grid.csv")
    if os.path.exists(exc_path):
        cols = _read_grid_csv(exc_path)
        grid = functionals.make_grid(boundary, cfg.grid_spacing)
        if grid.points.shape[0] != len(cols["label"]):
            raise DataError("excursion_grid.csv does not match the "
                            "configured grid spacing")
        render.svg_excursions(cfg.out("excursions.svg"), grid, cols["label"],
                              title=f"excursions at u={cfg.u}")
        full = np.full(grid.shape, None, dtype=object)
        full[grid.mask] = cols["label"]
        render.write_pgm(cfg.out("excursions.pgm"),
                         render.excursion_to_gray(full))
        wrote += ["excursions.svg", "excursions.pgm"]

    if not wrote:
        raise DataError("no fit outputs found to report on; run fit / areas "
                        "/ excursions first")
    print(f"report: wrote {', '.join(wrote)} -> {cfg.output_dir}")
    return 0


_REQUIRED_FILES = {
    "simulate": ("boundary",),
    "fit": ("boundary",),
    "areas": ("areas",),
    "excursions": ("boundary",),
    "report": ("boundary",),
}

_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "areas": cmd_areas,
    "excursions": cmd_excursions,
    "report": cmd_report,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="prevmap",
        description="geostatistical prevalence-mapping pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True,
                       help="path to the INI configuration file")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config,
                          require_files=_REQUIRED_FILES[args.command])
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, NoDataError, InvalidGeometryError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ConvergenceError, NotPositiveDefiniteError, RefinementError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except PrevmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
