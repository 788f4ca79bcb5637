"""Static map rendering: hand-written SVG plus PGM for pixel-exact tests.

SVG output keeps to plain rect / path / text elements with fixed-precision
coordinates so identical inputs give identical bytes.  PGM (binary P5)
encodes scalar fields as 8-bit gray for deterministic pixel comparison;
excursion labels map to three fixed gray levels.
"""

import numpy as np

__all__ = [
    "write_pgm",
    "field_to_gray",
    "excursion_to_gray",
    "svg_heatmap",
    "svg_choropleth",
    "svg_excursions",
]

# gray levels for the three-region excursion map
_GRAY = {"below": 80, "above": 200, "indeterminate": 0, "outside": 255}


def write_pgm(path, gray):
    """Binary P5 PGM from a (ny, nx) uint8 array; row 0 rendered at top."""
    g = np.asarray(gray, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode())
        fh.write(g[::-1].tobytes())


def field_to_gray(values, vmin=None, vmax=None):
    """Scale a (ny, nx) field to 0..250 gray; NaN renders as white (255)."""
    v = np.asarray(values, dtype=float)
    finite = np.isfinite(v)
    if vmin is None:
        vmin = float(v[finite].min()) if finite.any() else 0.0
    if vmax is None:
        vmax = float(v[finite].max()) if finite.any() else 1.0
    span = (vmax - vmin) or 1.0
    g = np.full(v.shape, 255, dtype=np.uint8)
    g[finite] = np.clip((v[finite] - vmin) / span * 250.0, 0, 250).astype(np.uint8)
    return g


def excursion_to_gray(labels_grid):
    """Map a (ny, nx) array of label strings (or None) to gray levels."""
    out = np.full(labels_grid.shape, _GRAY["outside"], dtype=np.uint8)
    for name, g in _GRAY.items():
        out[labels_grid == name] = g
    return out


def _colormap(t):
    """Blue -> cyan -> yellow -> red ramp on [0, 1]."""
    anchors = [(0.0, (20, 40, 160)), (0.33, (30, 170, 200)),
               (0.66, (240, 220, 60)), (1.0, (200, 30, 30))]
    t = min(max(float(t), 0.0), 1.0)
    for (t0, c0), (t1, c1) in zip(anchors, anchors[1:]):
        if t <= t1:
            f = (t - t0) / (t1 - t0) if t1 > t0 else 0.0
            return tuple(int(round(a + f * (b - a))) for a, b in zip(c0, c1))
    return anchors[-1][1]


def _hex(rgb):
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _svg_open(width, height, title):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="10" y="18" font-size="14" '
                     f'font-family="sans-serif">{title}</text>')
    return parts


def _frame_transform(bbox, width, height, pad=30):
    x0, y0, x1, y1 = bbox
    sx = (width - 2 * pad) / (x1 - x0)
    sy = (height - 2 * pad) / (y1 - y0)
    s = min(sx, sy)

    def tf(x, y):
        return (pad + (x - x0) * s, height - pad - (y - y0) * s)

    return tf


def svg_heatmap(path, grid, values, title="", width=640, height=560,
                vmin=None, vmax=None):
    """Colored-cell map of per-grid-point values on an EvalGrid."""
    full = grid.full(values)
    finite = np.isfinite(full)
    if vmin is None:
        vmin = float(full[finite].min()) if finite.any() else 0.0
    if vmax is None:
        vmax = float(full[finite].max()) if finite.any() else 1.0
    span = (vmax - vmin) or 1.0
    bbox = (grid.x[0], grid.y[0], grid.x[-1], grid.y[-1])
    tf = _frame_transform(bbox, width, height)
    dx = grid.x[1] - grid.x[0] if len(grid.x) > 1 else 1.0
    dy = grid.y[1] - grid.y[0] if len(grid.y) > 1 else 1.0
    parts = _svg_open(width, height, title)
    cw = abs(tf(dx, 0)[0] - tf(0, 0)[0]) + 0.5
    ch = abs(tf(0, dy)[1] - tf(0, 0)[1]) + 0.5
    for j, yv in enumerate(grid.y):
        for i, xv in enumerate(grid.x):
            if not finite[j, i]:
                continue
            c = _hex(_colormap((full[j, i] - vmin) / span))
            px, py = tf(xv - dx / 2, yv + dy / 2)
            parts.append(f'<rect x="{px:.2f}" y="{py:.2f}" width="{cw:.2f}" '
                         f'height="{ch:.2f}" fill="{c}"/>')
    parts.append(_legend_gradient(vmin, vmax, width))
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def _polygon_path(poly, tf):
    d = []
    for ring in poly.rings:
        pts = [tf(x, y) for x, y in ring]
        d.append("M" + " L".join(f"{px:.2f},{py:.2f}" for px, py in pts) + " Z")
    return " ".join(d)


def svg_choropleth(path, polygons, values, title="", width=640, height=560,
                   vmin=None, vmax=None):
    """Per-area fill map; the color scale bounds default to data min/max."""
    vals = np.asarray(values, dtype=float)
    if vmin is None:
        vmin = float(np.nanmin(vals))
    if vmax is None:
        vmax = float(np.nanmax(vals))
    span = (vmax - vmin) or 1.0
    xs0 = min(p.bbox()[0] for p in polygons)
    ys0 = min(p.bbox()[1] for p in polygons)
    xs1 = max(p.bbox()[2] for p in polygons)
    ys1 = max(p.bbox()[3] for p in polygons)
    tf = _frame_transform((xs0, ys0, xs1, ys1), width, height)
    parts = _svg_open(width, height, title)
    for poly, v in zip(polygons, vals):
        fill = "#dddddd" if not np.isfinite(v) \
            else _hex(_colormap((v - vmin) / span))
        parts.append(f'<path d="{_polygon_path(poly, tf)}" fill="{fill}" '
                     f'stroke="black" stroke-width="0.5" fill-rule="evenodd"/>')
    parts.append(_legend_gradient(vmin, vmax, width))
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def _legend_gradient(vmin, vmax, width, n=24):
    items = [f'<g font-size="11" font-family="sans-serif">']
    x = width - 160
    for i in range(n):
        c = _hex(_colormap(i / (n - 1)))
        items.append(f'<rect x="{x + i * 5}" y="8" width="5" height="10" '
                     f'fill="{c}"/>')
    items.append(f'<text x="{x}" y="30">{vmin:.4g}</text>')
    items.append(f'<text x="{x + n * 5 - 30}" y="30">{vmax:.4g}</text>')
    items.append("</g>")
    return "\n".join(items)


_EXC_COLORS = {"below": "#0000ff", "above": "#ff0000",
               "indeterminate": "#000000"}


def svg_excursions(path, grid, labels, title="", width=640, height=560):
    """Three-color excursion map with a three-class legend."""
    full = np.full(grid.shape, None, dtype=object)
    full[grid.mask] = labels
    bbox = (grid.x[0], grid.y[0], grid.x[-1], grid.y[-1])
    tf = _frame_transform(bbox, width, height)
    dx = grid.x[1] - grid.x[0] if len(grid.x) > 1 else 1.0
    dy = grid.y[1] - grid.y[0] if len(grid.y) > 1 else 1.0
    cw = abs(tf(dx, 0)[0] - tf(0, 0)[0]) + 0.5
    ch = abs(tf(0, dy)[1] - tf(0, 0)[1]) + 0.5
    parts = _svg_open(width, height, title)
    for j, yv in enumerate(grid.y):
        for i, xv in enumerate(grid.x):
            lab = full[j, i]
            if lab is None:
                continue
            px, py = tf(xv - dx / 2, yv + dy / 2)
            parts.append(f'<rect x="{px:.2f}" y="{py:.2f}" width="{cw:.2f}" '
                         f'height="{ch:.2f}" fill="{_EXC_COLORS[str(lab)]}"/>')
    # legend: exactly the three classes
    lx = width - 150
    parts.append('<g font-size="12" font-family="sans-serif" id="legend">')
    for li, name in enumerate(("above", "below", "indeterminate")):
        ly = 10 + 18 * li
        parts.append(f'<rect x="{lx}" y="{ly}" width="12" height="12" '
                     f'fill="{_EXC_COLORS[name]}" class="legend-item"/>')
        parts.append(f'<text x="{lx + 18}" y="{ly + 10}">{name}</text>')
    parts.append("</g>")
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
