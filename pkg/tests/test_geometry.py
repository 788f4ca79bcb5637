"""Geometry: polygons, mesh construction, FEM matrices, projection."""

import numpy as np
import pytest

from prevmap.errors import InvalidGeometryError
from prevmap.geometry import (Polygon, fem_matrices, point_in_area, project,
                              read_mesh_csv, read_polygons_csv,
                              read_polygons_geojson, write_mesh_csv,
                              write_polygons_csv, TriMesh)
from prevmap.meshing import build_mesh


# ---------------------------------------------------------------------------
# polygons
# ---------------------------------------------------------------------------

def test_polygon_orientation_normalized():
    # clockwise input outer ring is flipped to CCW
    p = Polygon([[(0, 0), (0, 1), (1, 1), (1, 0)]])
    x, y = p.rings[0][:, 0], p.rings[0][:, 1]
    signed = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    assert signed > 0


def test_polygon_rejects_degenerate():
    with pytest.raises(InvalidGeometryError):
        Polygon([[(0, 0), (1, 0)]])
    with pytest.raises(InvalidGeometryError):
        Polygon([[(0, 0), (1, 0), (2, 0)]])  # collinear, zero area
    with pytest.raises(InvalidGeometryError):
        Polygon([[(0, 0), (1, 1), (1, 0), (0, 1)]])  # bowtie


def test_polygon_area_with_hole():
    p = Polygon([[(0, 0), (4, 0), (4, 4), (0, 4)],
                 [(1, 1), (3, 1), (3, 3), (1, 3)]])
    assert p.area() == pytest.approx(16 - 4)


def test_point_in_area_basics(unit_square):
    assert point_in_area((0.5, 0.5), unit_square)
    assert point_in_area((0.0, 0.5), unit_square)  # boundary counts inside
    assert not point_in_area((1.5, 0.5), unit_square)


def test_point_in_hole_is_outside():
    p = Polygon([[(0, 0), (4, 0), (4, 4), (0, 4)],
                 [(1, 1), (3, 1), (3, 3), (1, 3)]])
    assert not point_in_area((2, 2), p)
    assert point_in_area((0.5, 0.5), p)


def test_containment_monte_carlo_area_oracle():
    # acceptance fraction of uniform bbox points estimates the area ratio
    tri = Polygon([[(0, 0), (1, 0), (0, 1)]])
    rng = np.random.default_rng(0)
    pts = rng.random((10000, 2))
    frac = tri.contains(pts).mean()
    ratio = tri.area() / 1.0
    se = np.sqrt(ratio * (1 - ratio) / 10000)
    assert abs(frac - ratio) < 3 * se


def test_polygon_distance(unit_square):
    d = unit_square.distance(np.array([[0.5, 0.5], [2.0, 0.5], [-1.0, -1.0]]))
    assert d[0] == 0.0
    assert d[1] == pytest.approx(1.0)
    assert d[2] == pytest.approx(np.sqrt(2))


# ---------------------------------------------------------------------------
# mesh construction
# ---------------------------------------------------------------------------

def test_build_mesh_unit_square_quality(unit_square):
    mesh = build_mesh(unit_square, interior_max_edge=0.1,
                      extension_factor=1.5, exterior_max_edge=0.4)
    mesh.validate()
    assert mesh.min_angle_deg() >= 20.0
    # all interior triangle edges <= 0.1
    tri = mesh.triangles
    interior_tri = mesh.interior_flag[tri].all(axis=1)
    v = mesh.vertices
    for tid in np.where(interior_tri)[0]:
        a, b, c = v[tri[tid]]
        for e in (np.linalg.norm(a - b), np.linalg.norm(b - c),
                  np.linalg.norm(c - a)):
            assert e <= 0.1 + 1e-12


def test_build_mesh_two_zone_structure(square10):
    # Kenya-like: fine inside, triangles grow rapidly outside
    mesh = build_mesh(square10, interior_max_edge=0.5, extension_factor=1.5,
                      exterior_max_edge=3.0)
    v = mesh.vertices
    tri = mesh.triangles
    a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    lmax = np.maximum(np.maximum(np.linalg.norm(a - b, axis=1),
                                 np.linalg.norm(b - c, axis=1)),
                      np.linalg.norm(c - a, axis=1))
    cent = (a + b + c) / 3
    inner = ((cent[:, 0] > 0) & (cent[:, 0] < 10)
             & (cent[:, 1] > 0) & (cent[:, 1] < 10))
    far = square10.distance(cent) > 4.0
    assert lmax[inner].max() <= 0.5 + 1e-12
    assert np.median(lmax[far]) > 2.5 * np.median(lmax[inner])
    # extension covers (extension_factor - 1) * diagonal beyond the bbox
    margin = 0.5 * np.hypot(10, 10)
    assert v[:, 0].min() == pytest.approx(-margin)
    assert v[:, 0].max() == pytest.approx(10 + margin)


def test_build_mesh_tiny_polygon_still_covers():
    # interior edge larger than the polygon itself
    tri_poly = Polygon([[(0, 0), (1, 0), (0, 1)]])
    mesh = build_mesh(tri_poly, interior_max_edge=5.0, extension_factor=1.5)
    mesh.validate()
    assert len(mesh.triangles) >= 1
    # point-in-mesh sampling oracle: polygon and ring are covered
    rng = np.random.default_rng(1)
    pts = rng.random((500, 2)) * 1.0
    inside_poly = tri_poly.contains(pts)
    pr = project(mesh, pts[inside_poly])
    assert not pr.out_of_mesh.any()


def test_build_mesh_input_validation(unit_square):
    with pytest.raises(InvalidGeometryError):
        build_mesh(unit_square, interior_max_edge=-1)
    with pytest.raises(InvalidGeometryError):
        build_mesh(unit_square, 0.1, extension_factor=0.5)
    with pytest.raises(InvalidGeometryError):
        build_mesh(unit_square, 0.1, exterior_max_edge=0.05)


def test_mesh_determinism(unit_square):
    m1 = build_mesh(unit_square, 0.25, 1.5, 1.0)
    m2 = build_mesh(unit_square, 0.25, 1.5, 1.0)
    assert np.array_equal(m1.vertices, m2.vertices)
    assert np.array_equal(m1.triangles, m2.triangles)


# ---------------------------------------------------------------------------
# FEM matrices
# ---------------------------------------------------------------------------

def test_fem_single_right_triangle():
    mesh = TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                   np.array([[0, 1, 2]]))
    c, g = fem_matrices(mesh)
    assert np.allclose(c.diagonal(), [1 / 6, 1 / 6, 1 / 6])
    # stiffness of the unit right triangle
    expected = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0],
                         [-0.5, 0.0, 0.5]])
    assert np.allclose(g.toarray(), expected)


def test_fem_mass_conservation_and_nullspace(coarse_mesh10, coarse_fem10):
    c, g = coarse_fem10
    assert c.diagonal().sum() == pytest.approx(coarse_mesh10.area(), rel=1e-9)
    ones = np.ones(coarse_mesh10.num_vertices)
    rowmax = np.abs(g).max()
    assert np.abs(g @ ones).max() <= 1e-10 * rowmax


def test_fem_stiffness_symmetry(coarse_fem10):
    _, g = coarse_fem10
    assert abs(g - g.T).max() < 1e-12


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def test_project_vertex_and_centroid(coarse_mesh10):
    mesh = coarse_mesh10
    vid = 10
    pr = project(mesh, mesh.vertices[[vid]])
    row = pr.matrix.getrow(0)
    assert row.nnz == 1
    assert row.data[0] == pytest.approx(1.0)
    assert row.indices[0] == vid

    tri = mesh.triangles[5]
    centroid = mesh.vertices[tri].mean(axis=0)
    pr = project(mesh, centroid[None, :])
    row = pr.matrix.getrow(0).toarray().ravel()
    assert np.allclose(np.sort(row[tri]), [1 / 3] * 3)


def test_project_linear_exactness(coarse_mesh10):
    # piecewise-linear basis reproduces affine functions exactly
    mesh = coarse_mesh10
    f = lambda p: 2 * p[:, 0] + 3 * p[:, 1] - 1
    nodal = f(mesh.vertices)
    rng = np.random.default_rng(2)
    pts = rng.random((200, 2)) * 10
    pr = project(mesh, pts)
    assert not pr.out_of_mesh.any()
    assert np.abs(pr.matrix @ nodal - f(pts)).max() < 1e-12


def test_project_partition_of_unity(coarse_mesh10):
    rng = np.random.default_rng(3)
    pts = rng.random((500, 2)) * 24 - 7  # includes the extension zone
    pr = project(coarse_mesh10, pts)
    sums = np.asarray(pr.matrix.sum(axis=1)).ravel()
    inside = ~pr.out_of_mesh
    assert np.allclose(sums[inside], 1.0, atol=1e-12)
    assert np.all(sums[~inside] == 0.0)
    assert pr.matrix.toarray().min() >= 0
    # at most 3 nonzeros per row
    nnz_rows = np.diff(pr.matrix.indptr)
    assert nnz_rows.max() <= 3


def test_project_out_of_hull_flagged(coarse_mesh10):
    pr = project(coarse_mesh10, np.array([[100.0, 100.0]]))
    assert pr.out_of_mesh[0]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def test_polygon_geojson_roundtrip(tmp_path):
    import json
    gj = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"id": "poly"},
         "geometry": {"type": "Polygon",
                      "coordinates": [[[0, 0], [2, 0], [2, 2], [0, 2], [0, 0]],
                                      [[0.5, 0.5], [1, 0.5], [1, 1],
                                       [0.5, 1], [0.5, 0.5]]]}},
        {"type": "Feature", "properties": {"id": "multi"},
         "geometry": {"type": "MultiPolygon",
                      "coordinates": [
                          [[[3, 3], [4, 3], [4, 4], [3, 4], [3, 3]]],
                          [[[5, 5], [6, 5], [6, 6], [5, 6], [5, 5]]]]}},
    ]}
    path = tmp_path / "areas.geojson"
    path.write_text(json.dumps(gj))
    polys = read_polygons_geojson(path)
    assert [p.id for p in polys] == ["poly", "multi#0", "multi#1"]
    assert polys[0].area() == pytest.approx(4 - 0.25)


def test_polygon_csv_roundtrip(tmp_path):
    p = Polygon([[(0, 0), (3, 0), (3, 2), (0, 2)], [(1, 0.5), (2, 0.5), (2, 1.5), (1, 1.5)]],
                id="ring")
    path = tmp_path / "polys.csv"
    write_polygons_csv(path, [p])
    back = read_polygons_csv(path)
    assert len(back) == 1
    assert back[0].id == "ring"
    assert back[0].area() == pytest.approx(p.area())


def test_mesh_csv_roundtrip(tmp_path, coarse_mesh10):
    vp, tp = tmp_path / "verts.csv", tmp_path / "tris.csv"
    write_mesh_csv(coarse_mesh10, vp, tp)
    back = read_mesh_csv(vp, tp)
    assert np.allclose(back.vertices, coarse_mesh10.vertices)
    assert np.array_equal(back.triangles, coarse_mesh10.triangles)
    assert np.array_equal(back.interior_flag, coarse_mesh10.interior_flag)
