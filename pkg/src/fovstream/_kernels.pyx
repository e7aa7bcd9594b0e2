# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels (tile coverage and solid-angle histograms).

Same contracts as ``_kernels_py``.  Tile lookup uses the edge tables from
``_kernels_py`` and only correctly rounded arithmetic, so both backends pick
the same tile even for points exactly on an edge.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport atan2, sqrt, floor, sin, cos, fabs, M_PI
from libc.stdlib cimport malloc, free

cnp.import_array()

from fovstream._kernels_py import edge_tables as _edge_tables

cdef double _EPS = 1e-15


def tile_index(dirs, int rows, int cols):
    cdef const double[:, ::1] d = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    cdef Py_ssize_t n = d.shape[0], i
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] o = out
    ze_a, ec_a, es_a = _edge_tables(rows, cols)
    cdef const double* ze = <const double*>cnp.PyArray_DATA(ze_a)
    cdef const double* ec = <const double*>cnp.PyArray_DATA(ec_a)
    cdef const double* es = <const double*>cnp.PyArray_DATA(es_a)
    for i in range(n):
        o[i] = _tile_of_tab(d[i, 0], d[i, 1], d[i, 2], ze, ec, es, rows, cols)
    return out


cdef void _sort(double* a, int n) noexcept nogil:
    cdef int i, j
    cdef double key
    for i in range(1, n):
        key = a[i]
        j = i - 1
        while j >= 0 and a[j] > key:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = key


cdef inline Py_ssize_t _tile_of_tab(double x, double y, double z, const double* zedge,
                                     const double* ec, const double* es, int rows, int cols) noexcept nogil:
    # bisection on the row-edge sines and column-edge directions
    cdef double zz = z / sqrt(x * x + y * y + z * z)
    cdef int lo = 0, hi = rows - 1, mid, half, base
    while lo < hi:  # first row whose lower edge lies below zz
        mid = (lo + hi) >> 1
        if zz > zedge[mid]:
            hi = mid
        else:
            lo = mid + 1
    cdef int row = lo
    cdef long col
    if cols & 1:
        col = <long>floor((0.5 - atan2(y, x) / (2.0 * M_PI)) * cols)
        col = col % cols
        if col < 0:
            col += cols
        return row * cols + col
    # lon in (0, pi] -> columns [0, half), lon in (-pi, 0] -> [half, cols);
    # col = base + #{c in half-plane : lon <= edge_c}, edges decreasing
    half = cols >> 1
    if x == 0 and y == 0:  # pole: atan2(0, 0) = 0
        return row * cols + half
    base = 0 if (y > 0 or (y == 0 and x < 0)) else half
    lo = base
    hi = base + half - 1
    while lo < hi:
        mid = (lo + hi) >> 1
        if x * es[mid] - y * ec[mid] >= 0:  # lon <= lower edge of column mid
            lo = mid + 1
        else:
            hi = mid
    return row * cols + lo


_TABLES = {}


def _tables(int rows, int cols):
    key = (rows, cols)
    t = _TABLES.get(key)
    if t is None:
        lat = np.pi * (0.5 - (np.arange(rows) + 0.5) / rows)
        lon = np.pi * (1.0 - 2.0 * (np.arange(cols) + 0.5) / cols)
        la, lo = np.meshgrid(lat, lon, indexing="ij")
        centres = np.ascontiguousarray(
            np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1).reshape(-1, 3))
        theta = np.pi * (1.0 - 2.0 * np.arange(cols) / cols)
        normals = np.ascontiguousarray(np.stack([-np.sin(theta), np.cos(theta)], axis=-1))
        sig2 = np.ascontiguousarray(np.sin(np.pi * (0.5 - np.arange(1, rows) / rows)) ** 2)
        t = (centres, normals, sig2)
        _TABLES[key] = t
    return t


cdef void _trace_edge(double* p0, double* d, double smax, int rows, int cols,
                      const double* normals, const double* sig2,
                      const double* ze, const double* ec, const double* es,
                      unsigned char* mask, double* buf) noexcept nogil:
    cdef int n = 0, k, j
    cdef double nx, ny, den, s
    cdef double s2, a, b, c, disc, sq, dd, pd, pp
    buf[n] = -smax
    n += 1
    for k in range(cols):
        nx = normals[2 * k]
        ny = normals[2 * k + 1]
        den = nx * d[0] + ny * d[1]
        if fabs(den) > _EPS:
            s = -(nx * p0[0] + ny * p0[1]) / den
            if s > -smax and s < smax:
                buf[n] = s
                n += 1
    dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    pd = p0[0] * d[0] + p0[1] * d[1] + p0[2] * d[2]
    pp = p0[0] * p0[0] + p0[1] * p0[1] + p0[2] * p0[2]
    for j in range(rows - 1):
        s2 = sig2[j]
        if s2 == 0.0:
            # equator: double root of the quadratic, solve z = 0 directly
            if fabs(d[2]) > _EPS:
                s = -p0[2] / d[2]
                if s > -smax and s < smax:
                    buf[n] = s
                    n += 1
            continue
        a = d[2] * d[2] - s2 * dd
        b = 2.0 * (p0[2] * d[2] - s2 * pd)
        c = p0[2] * p0[2] - s2 * pp
        if fabs(a) <= _EPS:
            if fabs(b) > _EPS:
                s = -c / b
                if s > -smax and s < smax:
                    buf[n] = s
                    n += 1
        else:
            disc = b * b - 4.0 * a * c
            if disc >= 0.0:
                sq = sqrt(disc)
                s = (-b + sq) / (2.0 * a)
                if s > -smax and s < smax:
                    buf[n] = s
                    n += 1
                s = (-b - sq) / (2.0 * a)
                if s > -smax and s < smax:
                    buf[n] = s
                    n += 1
    buf[n] = smax
    n += 1
    _sort(buf + 1, n - 2)
    for k in range(n):
        s = buf[k]
        mask[_tile_of_tab(p0[0] + s * d[0], p0[1] + s * d[1], p0[2] + s * d[2], ze, ec, es, rows, cols)] = 1
        if k + 1 < n:
            s = 0.5 * (buf[k] + buf[k + 1])
            mask[_tile_of_tab(p0[0] + s * d[0], p0[1] + s * d[1], p0[2] + s * d[2], ze, ec, es, rows, cols)] = 1


cdef void _cover(const double* F, const double* L, const double* U, double tan_h, double tan_v,
                 int rows, int cols, const double* cen, const double* nrm, const double* sg,
                 const double* ze, const double* ec, const double* es,
                 unsigned char* m, double* buf) noexcept nogil:
    cdef int i, t
    cdef double x, y, z, cf
    cdef double p0[3]
    cdef double d[3]
    for t in range(rows * cols):
        x = cen[3 * t]
        y = cen[3 * t + 1]
        z = cen[3 * t + 2]
        cf = x * F[0] + y * F[1] + z * F[2]
        if cf > 0 and fabs(x * L[0] + y * L[1] + z * L[2]) <= tan_h * cf \
                and fabs(x * U[0] + y * U[1] + z * U[2]) <= tan_v * cf:
            m[t] = 1
    # top, bottom, left, right edges
    for i in range(3):
        p0[i] = F[i] + tan_v * U[i]
        d[i] = L[i]
    _trace_edge(p0, d, tan_h, rows, cols, nrm, sg, ze, ec, es, m, buf)
    for i in range(3):
        p0[i] = F[i] - tan_v * U[i]
    _trace_edge(p0, d, tan_h, rows, cols, nrm, sg, ze, ec, es, m, buf)
    for i in range(3):
        p0[i] = F[i] + tan_h * L[i]
        d[i] = U[i]
    _trace_edge(p0, d, tan_v, rows, cols, nrm, sg, ze, ec, es, m, buf)
    for i in range(3):
        p0[i] = F[i] - tan_h * L[i]
    _trace_edge(p0, d, tan_v, rows, cols, nrm, sg, ze, ec, es, m, buf)


def coverage_masks(f, l, u, tans, int rows, int cols):
    """One coverage row per (tan_h, tan_v) pair in ``tans``, all around the same axes."""
    cdef double F[3]
    cdef double L[3]
    cdef double U[3]
    cdef int i, k
    for i in range(3):
        F[i] = f[i]
        L[i] = l[i]
        U[i] = u[i]
    cdef int nk = len(tans)
    cdef double* tv = <double*>malloc(2 * nk * sizeof(double) + 1)
    for k in range(nk):
        tv[2 * k] = tans[k][0]
        tv[2 * k + 1] = tans[k][1]
    # cached tables are private contiguous float64 arrays: use raw pointers
    cen_a, nrm_a, sg_a = _tables(rows, cols)
    ze_a, ec_a, es_a = _edge_tables(rows, cols)
    cdef const double* cen = <const double*>cnp.PyArray_DATA(cen_a)
    cdef const double* nrm = <const double*>cnp.PyArray_DATA(nrm_a)
    cdef const double* sg = <const double*>cnp.PyArray_DATA(sg_a)
    cdef const double* ze = <const double*>cnp.PyArray_DATA(ze_a)
    cdef const double* ec = <const double*>cnp.PyArray_DATA(ec_a)
    cdef const double* es = <const double*>cnp.PyArray_DATA(es_a)
    out = np.zeros((nk, rows * cols), dtype=np.uint8)
    cdef unsigned char* m = <unsigned char*>cnp.PyArray_DATA(out)
    cdef double* buf = <double*>malloc((cols + 2 * rows + 4) * sizeof(double))
    with nogil:
        for k in range(nk):
            _cover(F, L, U, tv[2 * k], tv[2 * k + 1], rows, cols, cen, nrm, sg,
                   ze, ec, es, m + k * rows * cols, buf)
    free(buf)
    free(tv)
    return out


def coverage_mask(f, l, u, double tan_h, double tan_v, int rows, int cols):
    return coverage_masks(f, l, u, [(tan_h, tan_v)], rows, cols)[0]


def tile_histogram(f, l, u, cam_dirs, weights, int rows, int cols):
    cdef const double[:, ::1] cd = np.ascontiguousarray(cam_dirs, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double F0 = f[0], F1 = f[1], F2 = f[2]
    cdef double L0 = l[0], L1 = l[1], L2 = l[2]
    cdef double U0 = u[0], U1 = u[1], U2 = u[2]
    ze_a, ec_a, es_a = _edge_tables(rows, cols)
    cdef const double* ze = <const double*>cnp.PyArray_DATA(ze_a)
    cdef const double* ec = <const double*>cnp.PyArray_DATA(ec_a)
    cdef const double* es = <const double*>cnp.PyArray_DATA(es_a)
    out = np.zeros(rows * cols, dtype=np.float64)
    cdef double[::1] h = out
    cdef Py_ssize_t i, n = cd.shape[0]
    cdef double a, b, c
    with nogil:
        for i in range(n):
            a = cd[i, 0]
            b = cd[i, 1]
            c = cd[i, 2]
            h[_tile_of_tab(a * F0 + b * L0 + c * U0,
                           a * F1 + b * L1 + c * U1,
                           a * F2 + b * L2 + c * U2, ze, ec, es, rows, cols)] += w[i]
    return out


def frustum_weight(world_dirs, weights, f, l, u, double tan_h, double tan_v):
    cdef const double[:, ::1] d = np.ascontiguousarray(world_dirs, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double F0 = f[0], F1 = f[1], F2 = f[2]
    cdef double L0 = l[0], L1 = l[1], L2 = l[2]
    cdef double U0 = u[0], U1 = u[1], U2 = u[2]
    cdef Py_ssize_t i, n = d.shape[0]
    cdef double total = 0.0, cf
    with nogil:
        for i in range(n):
            cf = d[i, 0] * F0 + d[i, 1] * F1 + d[i, 2] * F2
            if cf > 0 and fabs(d[i, 0] * L0 + d[i, 1] * L1 + d[i, 2] * L2) <= tan_h * cf \
                    and fabs(d[i, 0] * U0 + d[i, 1] * U1 + d[i, 2] * U2) <= tan_v * cf:
                total += w[i]
    return total


# --- per-frame simulator kernels ------------------------------------------------
# region codes: 0 none, 1 PF, 2 PF+, 3 RI

def build_region(const unsigned char[::1] inner, const unsigned char[::1] outer,
                 long ri_start, long ri_count, const double[::1] area, signed char[::1] region):
    """Fill ``region`` (RI block first, then PF, then PF+); return (a_pf, a_pfplus, a_ri)."""
    cdef Py_ssize_t i, n = region.shape[0]
    cdef long off
    cdef signed char c
    cdef double a1 = 0.0, a2 = 0.0, a3 = 0.0
    with nogil:
        for i in range(n):
            off = (i - ri_start) % n
            if off < 0:
                off += n
            if off < ri_count:
                c = 3
                a3 += area[i]
            elif inner[i]:
                c = 1
                a1 += area[i]
            elif outer[i]:
                c = 2
                a2 += area[i]
            else:
                c = 0
            region[i] = c
    return a1, a2, a3


def charge_tiles(const signed char[::1] region, long long[::1] last_frame, double[::1] quality,
                 const double[::1] area, long frame, rate_lut, q_lut, inter_lut,
                 const double[::1] rho_tab, long long[::1] pf_counts, long long[::1] pp_counts):
    """Bits of one frame; stamps coded tiles and counts PF / PF+ lapses."""
    cdef double rate[4]
    cdef double ql[4]
    cdef int inter[4]
    cdef int c
    for c in range(4):
        rate[c] = rate_lut[c]
        ql[c] = q_lut[c]
        inter[c] = 1 if inter_lut[c] else 0
    cdef Py_ssize_t i, n = region.shape[0]
    cdef long long tau
    cdef double p, bits = 0.0
    with nogil:
        for i in range(n):
            c = region[i]
            if c == 0:
                continue
            p = area[i] * rate[c]
            if inter[c]:
                tau = frame - last_frame[i]
                p *= rho_tab[tau]
                if c == 1:
                    pf_counts[tau] += 1
                else:
                    pp_counts[tau] += 1
            bits += p
            last_frame[i] = frame
            quality[i] = ql[c]
    return bits


def display_stats(const double[::1] hist, const long long[::1] last_frame, const double[::1] quality,
                  long frame, const double[::1] kappa_tab, const signed char[::1] region,
                  const long[::1] pa, const long[::1] pb, double[::1] tq):
    """(viewport quality, spatial discontinuity, hit PF, hit PF+, hit RI); fills ``tq``."""
    cdef Py_ssize_t i, n = hist.shape[0], m = pa.shape[0]
    cdef double vq = 0.0, tot = 0.0, d, sd = 0.0
    cdef double by[4]
    cdef long cnt = 0
    by[0] = by[1] = by[2] = by[3] = 0.0
    with nogil:
        for i in range(n):
            tq[i] = kappa_tab[frame - last_frame[i]] * quality[i]
            vq += hist[i] * tq[i]
            tot += hist[i]
            by[region[i]] += hist[i]
        for i in range(m):
            if hist[pa[i]] > 0 and hist[pb[i]] > 0:
                d = tq[pa[i]] - tq[pb[i]]
                sd += fabs(d)
                cnt += 1
    return (vq, sd / cnt if cnt else 0.0,
            by[1] / tot if tot > 0 else 0.0, by[2] / tot if tot > 0 else 0.0, by[3] / tot if tot > 0 else 0.0)
