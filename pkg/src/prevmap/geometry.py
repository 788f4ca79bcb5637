"""Planar geometry: polygons, triangular meshes, FEM matrices, projection.

Coordinates are plain map units on the plane; there is no notion of
projection or geodesy here.  Polygons follow the usual convention of one
counter-clockwise outer ring plus optional clockwise hole rings.
"""

import csv
import json

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import InvalidGeometryError

__all__ = [
    "Polygon",
    "TriMesh",
    "Projector",
    "point_in_area",
    "fem_matrices",
    "project",
    "read_polygons_geojson",
    "read_polygons_csv",
    "write_polygons_csv",
    "write_mesh_csv",
    "read_mesh_csv",
]


# ---------------------------------------------------------------------------
# polygons
# ---------------------------------------------------------------------------

def _ring_signed_area(ring):
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_intersect(p1, p2, q1, q2):
    """Proper intersection test for segments p1p2 and q1q2."""
    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    d1 = cross(q1, q2, p1)
    d2 = cross(q1, q2, p2)
    d3 = cross(p1, p2, q1)
    d4 = cross(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


class Polygon:
    """Simple polygon with optional holes.

    ``rings`` are arrays of shape (k, 2) without a repeated closing vertex;
    ring 0 is the outer boundary.  Orientation is normalized on construction
    (outer CCW, holes CW).  Degenerate input raises
    :class:`InvalidGeometryError`.
    """

    def __init__(self, rings, id="0", check_intersections=True):
        self.id = str(id)
        norm = []
        for i, ring in enumerate(rings):
            r = np.asarray(ring, dtype=float)
            if r.ndim != 2 or r.shape[1] != 2:
                raise InvalidGeometryError(f"ring {i}: expected (k, 2) array")
            if len(r) > 3 and np.allclose(r[0], r[-1]):
                r = r[:-1]
            if len(r) < 3:
                raise InvalidGeometryError(f"ring {i}: fewer than 3 vertices")
            if not np.all(np.isfinite(r)):
                raise InvalidGeometryError(f"ring {i}: non-finite coordinate")
            a = _ring_signed_area(r)
            if abs(a) < 1e-14:
                raise InvalidGeometryError(f"ring {i}: zero area")
            want_ccw = i == 0
            if (a > 0) != want_ccw:
                r = r[::-1]
            norm.append(r)
        self.rings = norm
        if self.area() <= 0:
            raise InvalidGeometryError("polygon has non-positive area")
        if check_intersections:
            self._check_self_intersections()

    def _check_self_intersections(self):
        segs = []
        for ring in self.rings:
            closed = np.vstack([ring, ring[:1]])
            for i in range(len(ring)):
                segs.append((closed[i], closed[i + 1]))
        n = len(segs)
        if n > 2000:  # quadratic check priced out; trust large inputs
            return
        for i in range(n):
            for j in range(i + 2, n):
                a1, a2 = segs[i]
                b1, b2 = segs[j]
                shared = any(np.array_equal(p, q)
                             for p in (a1, a2) for q in (b1, b2))
                if shared:
                    continue
                if _segments_intersect(a1, a2, b1, b2):
                    raise InvalidGeometryError(
                        f"self-intersection between segments {i} and {j}")

    def area(self):
        """Outer area minus hole areas."""
        total = abs(_ring_signed_area(self.rings[0]))
        for hole in self.rings[1:]:
            total -= abs(_ring_signed_area(hole))
        return total

    def bbox(self):
        outer = self.rings[0]
        return (outer[:, 0].min(), outer[:, 1].min(),
                outer[:, 0].max(), outer[:, 1].max())

    def contains(self, points, boundary_tol=1e-12):
        """Even-odd containment for an array of points, holes respected.

        Points on a ring edge (within ``boundary_tol`` of it, scaled by the
        bounding-box size) count as inside.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.zeros(len(pts), dtype=bool)
        on_edge = np.zeros(len(pts), dtype=bool)
        x0, y0, x1, y1 = self.bbox()
        tol = boundary_tol * max(x1 - x0, y1 - y0, 1.0)
        for ring in self.rings:
            xa, ya = ring[:, 0], ring[:, 1]
            xb, yb = np.roll(xa, -1), np.roll(ya, -1)
            px = pts[:, 0][:, None]
            py = pts[:, 1][:, None]
            cond = (ya[None, :] > py) != (yb[None, :] > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = xa + (py - ya) * (xb - xa) / (yb - ya)
            crossing = cond & (px < xint)
            inside ^= (np.sum(crossing, axis=1) % 2).astype(bool)
            # boundary test: distance point-to-segment below tol
            dx, dy = xb - xa, yb - ya
            L2 = dx * dx + dy * dy
            t = ((px - xa) * dx + (py - ya) * dy) / np.where(L2 > 0, L2, 1.0)
            t = np.clip(t, 0.0, 1.0)
            d2 = (px - (xa + t * dx)) ** 2 + (py - (ya + t * dy)) ** 2
            on_edge |= (d2 <= tol * tol).any(axis=1)
        result = inside | on_edge
        if np.ndim(points) == 1:
            return bool(result[0])
        return result

    def distance(self, points):
        """Unsigned distance to the polygon: 0 inside, else distance to rings."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        best = np.full(len(pts), np.inf)
        for ring in self.rings:
            xa, ya = ring[:, 0], ring[:, 1]
            xb, yb = np.roll(xa, -1), np.roll(ya, -1)
            dx, dy = xb - xa, yb - ya
            L2 = np.where(dx * dx + dy * dy > 0, dx * dx + dy * dy, 1.0)
            # chunk over points to bound memory on large queries
            for s in range(0, len(pts), 4096):
                px = pts[s:s + 4096, 0][:, None]
                py = pts[s:s + 4096, 1][:, None]
                t = np.clip(((px - xa) * dx + (py - ya) * dy) / L2, 0.0, 1.0)
                d2 = (px - (xa + t * dx)) ** 2 + (py - (ya + t * dy)) ** 2
                best[s:s + 4096] = np.minimum(best[s:s + 4096], d2.min(axis=1))
        d = np.sqrt(best)
        d[self.contains(pts)] = 0.0
        return d if np.ndim(points) > 1 else float(d[0])


def point_in_area(point, polygon):
    """Even-odd containment of a single point; boundary counts inside."""
    return bool(polygon.contains(np.asarray(point, dtype=float)))


# ---------------------------------------------------------------------------
# triangular mesh
# ---------------------------------------------------------------------------

class TriMesh:
    """Conforming planar triangulation with piecewise-linear basis functions.

    ``vertices``: (m, 2) float array.  ``triangles``: (nt, 3) int array with
    counter-clockwise vertex order.  ``interior_flag`` marks vertices inside
    the study region as opposed to the coarse extension zone.
    """

    def __init__(self, vertices, triangles, interior_flag=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        if interior_flag is None:
            interior_flag = np.ones(len(self.vertices), dtype=bool)
        self.interior_flag = np.asarray(interior_flag, dtype=bool)
        self._orient()

    def _orient(self):
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        cross = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                 - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
        flip = cross < 0
        if flip.any():
            self.triangles[flip] = self.triangles[flip][:, [0, 2, 1]]

    @property
    def num_vertices(self):
        return len(self.vertices)

    def signed_areas(self):
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                      - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))

    def area(self):
        return float(np.abs(self.signed_areas()).sum())

    def min_angle_deg(self):
        v = self.vertices
        t = self.triangles
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

        def ang(u, w):
            cosv = np.sum(u * w, axis=1) / (
                np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
            return np.arccos(np.clip(cosv, -1.0, 1.0))

        A = ang(b - a, c - a)
        B = ang(a - b, c - b)
        C = np.pi - A - B
        return float(np.degrees(np.minimum(np.minimum(A, B), C).min()))

    def edges(self):
        """Unique undirected edges and the number of adjacent triangles each."""
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def validate(self, duplicate_tol=1e-9):
        """Raise InvalidGeometryError on any violated mesh invariant."""
        if np.any(self.signed_areas() <= 0):
            raise InvalidGeometryError("mesh contains non-positive-area triangle")
        _, counts = self.edges()
        if counts.max() > 2:
            raise InvalidGeometryError("edge shared by more than 2 triangles")
        tree = cKDTree(self.vertices)
        if tree.query_pairs(duplicate_tol):
            raise InvalidGeometryError("duplicate vertices within tolerance")
        uniq, _ = self.edges()
        adj = sp.coo_matrix(
            (np.ones(len(uniq)), (uniq[:, 0], uniq[:, 1])),
            shape=(self.num_vertices, self.num_vertices))
        ncomp = sp.csgraph.connected_components(
            adj + adj.T, directed=False, return_labels=False)
        if ncomp != 1:
            raise InvalidGeometryError(f"mesh has {ncomp} connected components")
        return True


# ---------------------------------------------------------------------------
# finite-element matrices
# ---------------------------------------------------------------------------

def fem_matrices(mesh):
    """Lumped mass matrix C (diagonal) and stiffness matrix G.

    C_ii is one third of the total area of triangles adjacent to vertex i,
    which equals the integral of the hat function phi_i.  G_ij integrates
    grad(phi_i) . grad(phi_j) over the mesh.
    """
    v = mesh.vertices
    t = mesh.triangles
    m = mesh.num_vertices
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    area = 0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                        - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    cd = np.zeros(m)
    for i in range(3):
        np.add.at(cd, t[:, i], area / 3.0)

    x = v[:, 0][t]
    y = v[:, 1][t]
    # gradient coefficients of the three hat functions on each triangle
    gb = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    gc = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    rows, cols, vals = [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(t[:, i])
            cols.append(t[:, j])
            vals.append((gb[:, i] * gb[:, j] + gc[:, i] * gc[:, j]) / (4.0 * area))
    g = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, m)).tocsc()
    return sp.diags(cd).tocsc(), g


# ---------------------------------------------------------------------------
# point-to-mesh projection
# ---------------------------------------------------------------------------

class Projector:
    """Sparse barycentric projection of query points onto mesh vertices.

    ``matrix`` has one row per query point with at most 3 nonzeros summing
    to 1; rows of points outside the mesh hull are zero and flagged in
    ``out_of_mesh``.
    """

    def __init__(self, matrix, out_of_mesh):
        self.matrix = sp.csr_matrix(matrix)
        self.out_of_mesh = np.asarray(out_of_mesh, dtype=bool)

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other


def project(mesh, points, tol=1e-10):
    """Barycentric projection of each point onto its containing triangle."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(np.isfinite(pts)):
        raise ValueError("query points must be finite")
    v = mesh.vertices
    t = mesh.triangles
    a = v[t[:, 0]]
    e1 = v[t[:, 1]] - a
    e2 = v[t[:, 2]] - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]

    # bin triangles on a uniform grid keyed by their bounding boxes
    x0, y0 = v.min(axis=0)
    x1, y1 = v.max(axis=0)
    tmin = np.minimum(np.minimum(v[t[:, 0]], v[t[:, 1]]), v[t[:, 2]])
    tmax = np.maximum(np.maximum(v[t[:, 0]], v[t[:, 1]]), v[t[:, 2]])
    cell = max(np.median(tmax[:, 0] - tmin[:, 0]),
               np.median(tmax[:, 1] - tmin[:, 1]), 1e-12)
    nx = max(int(np.ceil((x1 - x0) / cell)), 1)
    ny = max(int(np.ceil((y1 - y0) / cell)), 1)
    buckets = {}
    ci0 = np.clip(((tmin[:, 0] - x0) / cell).astype(int), 0, nx - 1)
    ci1 = np.clip(((tmax[:, 0] - x0) / cell).astype(int), 0, nx - 1)
    cj0 = np.clip(((tmin[:, 1] - y0) / cell).astype(int), 0, ny - 1)
    cj1 = np.clip(((tmax[:, 1] - y0) / cell).astype(int), 0, ny - 1)
    for k in range(len(t)):
        for ci in range(ci0[k], ci1[k] + 1):
            for cj in range(cj0[k], cj1[k] + 1):
                buckets.setdefault((ci, cj), []).append(k)
    buckets = {k: np.asarray(ix) for k, ix in buckets.items()}

    pcell = np.column_stack([
        np.clip(((pts[:, 0] - x0) / cell).astype(int), 0, nx - 1),
        np.clip(((pts[:, 1] - y0) / cell).astype(int), 0, ny - 1),
    ])
    inside_box = ((pts[:, 0] >= x0 - tol) & (pts[:, 0] <= x1 + tol)
                  & (pts[:, 1] >= y0 - tol) & (pts[:, 1] <= y1 + tol))

    rows = np.full((len(pts), 3), -1, dtype=np.int64)
    wts = np.zeros((len(pts), 3))
    out = np.ones(len(pts), dtype=bool)

    order = np.lexsort((pcell[:, 1], pcell[:, 0]))
    s = 0
    while s < len(order):
        e = s
        key = (pcell[order[s], 0], pcell[order[s], 1])
        while e < len(order) and (pcell[order[e], 0], pcell[order[e], 1]) == key:
            e += 1
        idx = order[s:e]
        s = e
        cand = buckets.get(key)
        if cand is None:
            continue
        sub = idx[inside_box[idx]]
        if len(sub) == 0:
            continue
        d = pts[sub][:, None, :] - a[cand][None, :, :]
        w1 = (d[:, :, 0] * e2[cand, 1] - d[:, :, 1] * e2[cand, 0]) / det[cand]
        w2 = (e1[cand, 0] * d[:, :, 1] - e1[cand, 1] * d[:, :, 0]) / det[cand]
        w0 = 1.0 - w1 - w2
        ok = (w0 >= -tol) & (w1 >= -tol) & (w2 >= -tol)
        hit = ok.argmax(axis=1)
        found = ok[np.arange(len(sub)), hit]
        tri_ix = cand[hit[found]]
        ww = np.column_stack([w0[np.arange(len(sub)), hit],
                              w1[np.arange(len(sub)), hit],
                              w2[np.arange(len(sub)), hit]])[found]
        ww = np.clip(ww, 0.0, None)
        ww /= ww.sum(axis=1, keepdims=True)
        sel = sub[found]
        rows[sel] = t[tri_ix]
        wts[sel] = ww
        out[sel] = False

    nz = ~out
    r = np.repeat(np.where(nz)[0], 3)
    c = rows[nz].ravel()
    d = wts[nz].ravel()
    keep = d > 0
    mat = sp.csr_matrix((d[keep], (r[keep], c[keep])),
                        shape=(len(pts), mesh.num_vertices))
    return Projector(mat, out)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _polygon_from_geojson_coords(coords, pid):
    rings = [np.asarray(ring, dtype=float) for ring in coords]
    return Polygon(rings, id=pid)


def read_polygons_geojson(path):
    """Read polygons from a minimal GeoJSON file.

    Accepts a FeatureCollection, a bare Feature, or a bare geometry with
    type Polygon or MultiPolygon.  Lon-lat pairs are treated as planar
    map-unit coordinates.  Each MultiPolygon part becomes its own Polygon
    with a ``#part`` suffix on the id.
    """
    with open(path) as fh:
        obj = json.load(fh)
    feats = []
    if obj.get("type") == "FeatureCollection":
        feats = obj["features"]
    elif obj.get("type") == "Feature":
        feats = [obj]
    else:
        feats = [{"type": "Feature", "geometry": obj, "properties": {}}]
    out = []
    for i, feat in enumerate(feats):
        geom = feat.get("geometry") or {}
        pid = str((feat.get("properties") or {}).get("id", i))
        gtype = geom.get("type")
        if gtype == "Polygon":
            out.append(_polygon_from_geojson_coords(geom["coordinates"], pid))
        elif gtype == "MultiPolygon":
            parts = geom["coordinates"]
            for j, part in enumerate(parts):
                suffix = f"#{j}" if len(parts) > 1 else ""
                out.append(_polygon_from_geojson_coords(part, pid + suffix))
        else:
            raise InvalidGeometryError(f"unsupported geometry type: {gtype}")
    return out


def read_polygons_csv(path):
    """Read polygons from CSV rows (id, ring_index, vertex_index, x, y)."""
    data = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = row["id"]
            ring = int(row["ring_index"])
            data.setdefault(key, {}).setdefault(ring, []).append(
                (int(row["vertex_index"]), float(row["x"]), float(row["y"])))
    out = []
    for pid in data:
        rings = []
        for ring_ix in sorted(data[pid]):
            verts = sorted(data[pid][ring_ix])
            rings.append(np.array([(x, y) for _, x, y in verts]))
        out.append(Polygon(rings, id=pid))
    return out


def write_polygons_csv(path, polygons):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "ring_index", "vertex_index", "x", "y"])
        for poly in polygons:
            for ri, ring in enumerate(poly.rings):
                for vi, (x, y) in enumerate(ring):
                    w.writerow([poly.id, ri, vi, repr(float(x)), repr(float(y))])


def write_mesh_csv(mesh, vertices_path, triangles_path):
    with open(vertices_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "interior"])
        for i, (x, y) in enumerate(mesh.vertices):
            w.writerow([i, repr(float(x)), repr(float(y)),
                        int(mesh.interior_flag[i])])
    with open(triangles_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "v0", "v1", "v2"])
        for i, (a, b, c) in enumerate(mesh.triangles):
            w.writerow([i, a, b, c])


def read_mesh_csv(vertices_path, triangles_path):
    verts, flags = [], []
    with open(vertices_path, newline="") as fh:
        for row in csv.DictReader(fh):
            verts.append((float(row["x"]), float(row["y"])))
            flags.append(bool(int(row["interior"])))
    tris = []
    with open(triangles_path, newline="") as fh:
        for row in csv.DictReader(fh):
            tris.append((int(row["v0"]), int(row["v1"]), int(row["v2"])))
    return TriMesh(np.array(verts), np.array(tris), np.array(flags))
