"""Pure numpy implementation of the geometry kernels.

Mirrors ``_kernels.pyx`` function for function; used when the compiled
extension is unavailable or when ``FOVSTREAM_PURE_PYTHON=1`` is set.
"""

import numpy as np

_EPS = 1e-15


_EDGE_TABLES = {}


def edge_tables(rows, cols):
    """(row-edge sines, column-edge cosines, column-edge sines); shared by both backends."""
    t = _EDGE_TABLES.get((rows, cols))
    if t is None:
        # lower edge of row r at latitude pi (0.5 - (r + 1) / rows); last row catches everything
        ze = np.ascontiguousarray(np.sin(np.pi * (0.5 - np.arange(1, rows + 1) / rows)))
        ze[rows - 1] = -2.0
        # lower longitude edge of column c at pi - 2 pi (c + 1) / cols
        e = np.pi - 2.0 * np.pi * (np.arange(cols) + 1.0) / cols
        t = (ze, np.ascontiguousarray(np.cos(e)), np.ascontiguousarray(np.sin(e)))
        _EDGE_TABLES[rows, cols] = t
    return t


def tile_index(dirs, rows, cols):
    """Flat raster tile index of each direction (not necessarily unit).

    Cells are found by comparing against tabulated edge sines / edge directions
    rather than via asin / atan2, so the answer only involves correctly rounded
    arithmetic and matches the compiled kernel even for points on an edge.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    ze, ec, es = edge_tables(rows, cols)
    zz = z / np.sqrt(x * x + y * y + z * z)
    row = (ze[None, : rows - 1] >= zz[:, None]).sum(axis=1)
    if cols % 2:
        col = np.floor((0.5 - np.arctan2(y, x) / (2.0 * np.pi)) * cols).astype(np.int64) % cols
        return row * cols + col
    half = cols // 2
    # lon in (0, pi] -> columns [0, half), lon in (-pi, 0] -> [half, cols)
    base = np.where((y > 0) | ((y == 0) & (x < 0)), 0, half)
    c = base[:, None] + np.arange(half - 1)[None, :]
    col = base + (x[:, None] * es[c] - y[:, None] * ec[c] >= 0).sum(axis=1)
    col = np.where((x == 0) & (y == 0), half, col)  # pole
    return row * cols + col


def _tile_centres(rows, cols):
    r = np.arange(rows)
    c = np.arange(cols)
    lat = np.pi * (0.5 - (r + 0.5) / rows)
    lon = np.pi * (1.0 - 2.0 * (c + 0.5) / cols)
    lat, lon = np.meshgrid(lat, lon, indexing="ij")
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1).reshape(-1, 3)


def _split_points(p0, d, smax, rows, cols):
    """Arc parameters in (-smax, smax) where p0 + s*d crosses a tile border."""
    out = []
    theta = np.pi * (1.0 - 2.0 * np.arange(cols) / cols)
    nx, ny = -np.sin(theta), np.cos(theta)
    num = nx * p0[0] + ny * p0[1]
    den = nx * d[0] + ny * d[1]
    ok = np.abs(den) > _EPS
    out.append(-num[ok] / den[ok])

    sig = np.sin(np.pi * (0.5 - np.arange(1, rows) / rows))
    s2 = sig * sig
    dd = d @ d
    pd = p0 @ d
    pp = p0 @ p0
    # the equator (s2 == 0) is a double root of the quadratic below, whose
    # discriminant can round negative; solve z = 0 directly instead
    eq = s2 == 0.0
    if eq.any() and abs(d[2]) > _EPS:
        out.append(np.array([-p0[2] / d[2]]))
    s2 = s2[~eq]
    a = d[2] * d[2] - s2 * dd
    b = 2.0 * (p0[2] * d[2] - s2 * pd)
    c = p0[2] * p0[2] - s2 * pp
    lin = np.abs(a) <= _EPS
    lin_ok = lin & (np.abs(b) > _EPS)
    out.append(-c[lin_ok] / b[lin_ok])
    quad = ~lin
    disc = b[quad] ** 2 - 4.0 * a[quad] * c[quad]
    good = disc >= 0.0
    sq = np.sqrt(disc[good])
    aq = a[quad][good]
    bq = b[quad][good]
    out.append((-bq + sq) / (2.0 * aq))
    out.append((-bq - sq) / (2.0 * aq))

    s = np.concatenate(out)
    s = s[(s > -smax) & (s < smax)]
    return np.sort(s)


def coverage_mask(f, l, u, tan_h, tan_v, rows, cols):
    """Tiles touched by the gnomonic rectangle |s|<=tan_h, |t|<=tan_v around f."""
    f = np.asarray(f, dtype=float)
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    mask = np.zeros(rows * cols, dtype=np.uint8)

    c = _tile_centres(rows, cols)
    cf = c @ f
    inside = (cf > 0) & (np.abs(c @ l) <= tan_h * cf) & (np.abs(c @ u) <= tan_v * cf)
    mask[inside] = 1

    edges = (
        (f + tan_v * u, l, tan_h),
        (f - tan_v * u, l, tan_h),
        (f + tan_h * l, u, tan_v),
        (f - tan_h * l, u, tan_v),
    )
    for p0, d, smax in edges:
        s = _split_points(p0, d, smax, rows, cols)
        knots = np.concatenate([[-smax], s, [smax]])
        params = np.concatenate([knots, 0.5 * (knots[:-1] + knots[1:])])
        pts = p0[None, :] + params[:, None] * d[None, :]
        mask[tile_index(pts, rows, cols)] = 1
    return mask


def coverage_masks(f, l, u, tans, rows, cols):
    tans = np.atleast_2d(np.asarray(tans, dtype=float))
    return np.stack([coverage_mask(f, l, u, th, tv, rows, cols) for th, tv in tans])


def tile_histogram(f, l, u, cam_dirs, weights, rows, cols):
    """Sum of sample weights per tile for camera-frame samples rotated by (f,l,u)."""
    cam = np.asarray(cam_dirs, dtype=float)
    # elementwise in the compiled kernel's order; a BLAS matmul rounds differently,
    # which matters for samples lying exactly on a tile edge
    world = cam[:, 0:1] * np.asarray(f, float) + cam[:, 1:2] * np.asarray(l, float) + cam[:, 2:3] * np.asarray(u, float)
    idx = tile_index(world, rows, cols)
    return np.bincount(idx, weights=weights, minlength=rows * cols).astype(float)


def frustum_weight(world_dirs, weights, f, l, u, tan_h, tan_v):
    """Total weight of directions inside the frustum (f,l,u,tan_h,tan_v)."""
    d = np.asarray(world_dirs)
    cf = d @ np.asarray(f)
    inside = (cf > 0) & (np.abs(d @ np.asarray(l)) <= tan_h * cf) & (np.abs(d @ np.asarray(u)) <= tan_v * cf)
    return float(np.sum(np.asarray(weights)[inside]))


# --- per-frame simulator kernels ------------------------------------------------
# region codes: 0 none, 1 PF, 2 PF+, 3 RI

def build_region(inner, outer, ri_start, ri_count, area, region):
    n = len(region)
    ri = (np.arange(n) - ri_start) % n < ri_count
    inner = np.asarray(inner, dtype=bool)
    outer = np.asarray(outer, dtype=bool)
    region[:] = 0
    region[outer] = 2
    region[inner] = 1
    region[ri] = 3
    by = np.bincount(region, weights=area, minlength=4)
    return float(by[1]), float(by[2]), float(by[3])


def charge_tiles(region, last_frame, quality, area, frame, rate_lut, q_lut, inter_lut,
                 rho_tab, pf_counts, pp_counts):
    region = np.asarray(region)
    tau = frame - last_frame
    inter = np.asarray(inter_lut, dtype=bool)[region]
    per_tile = area * np.asarray(rate_lut, dtype=float)[region]
    per_tile[inter] *= rho_tab[tau[inter]]
    np.add.at(pf_counts, tau[inter & (region == 1)], 1)
    np.add.at(pp_counts, tau[inter & (region == 2)], 1)
    coded = region != 0
    last_frame[coded] = frame
    quality[coded] = np.asarray(q_lut, dtype=float)[region[coded]]
    return float(per_tile.sum())


def display_stats(hist, last_frame, quality, frame, kappa_tab, region, pa, pb, tq):
    tq[:] = kappa_tab[frame - last_frame] * quality
    sel = (hist[pa] > 0) & (hist[pb] > 0)
    n = int(np.count_nonzero(sel))
    sd = float(np.abs(tq[pa[sel]] - tq[pb[sel]]).sum() / n) if n else 0.0
    tot = hist.sum()
    by = np.bincount(region, weights=hist, minlength=4) / tot if tot > 0 else np.zeros(4)
    return float(hist @ tq), sd, float(by[1]), float(by[2]), float(by[3])
