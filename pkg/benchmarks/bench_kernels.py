"""Compiled kernels vs the numpy fallback.

    python benchmarks/bench_kernels.py [--session-seconds 20]

Prints per-call times for each kernel on the default 16x32 grid and the
wall time of one simulated session under each backend.
"""

import argparse
import time
import timeit

import numpy as np

from fovstream import _kernels_py, geometry as geo
from fovstream.config import SimConfig
from fovstream.sim import _neighbour_pairs, run_simulation
from fovstream.traces import synthetic_bandwidth_trace, synthetic_fov_trace

try:
    from fovstream import _kernels
except ImportError:
    _kernels = None


def per_call_us(fn, number=200, repeat=5):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e6


def kernel_cases(grid, rng):
    poses = [geo.FovPose.from_angles(rng.uniform(-180, 180), rng.uniform(-80, 80)) for _ in range(32)]
    n = grid.total
    region = rng.integers(0, 4, n).astype(np.int8)
    hist = geo.tile_histogram(poses[0], grid, 32)
    pa, pb = _neighbour_pairs(grid.rows, grid.cols)
    last = rng.integers(-1, 50, n).astype(np.int64)
    qual = rng.uniform(20, 45, n)
    rho_tab = np.linspace(1.0, 2.0, 64)
    kap_tab = np.linspace(1.0, 0.5, 64)
    inner = geo.coverage_mask(poses[0], grid).view(np.uint8)
    outer = geo.coverage_mask(poses[0].widened(50), grid).view(np.uint8)
    area = grid.tile_area
    it = iter(range(10**9))

    def cov(k):
        p = poses[next(it) % len(poses)]
        f, l, u = p.basis()
        tans = [geo._tangents(90.0 + b, 90.0 + b, 256) for b in (0, 10, 20, 30, 40, 50)]
        return lambda: k.coverage_masks(f, l, u, tans, grid.rows, grid.cols)

    def hist_fn(k):
        cam, w = geo._unit_samples(90.0, 90.0, 32)
        f, l, u = poses[1].basis()
        return lambda: k.tile_histogram(f, l, u, cam, w, grid.rows, grid.cols)

    def charge(k):
        counts = (np.zeros(64, dtype=np.int64), np.zeros(64, dtype=np.int64))
        lf = last.copy()
        q = qual.copy()
        return lambda: k.charge_tiles(region, lf, q, area, 55, (0.0, 9.0, 3.0, 2.0), (0.0, 40.0, 35.0, 30.0),
                                      (False, True, True, False), rho_tab, *counts)

    def display(k):
        tq = np.empty(n)
        return lambda: k.display_stats(hist, last, qual, 55, kap_tab, region, pa, pb, tq)

    def build(k):
        out = np.empty(n, dtype=np.int8)
        return lambda: k.build_region(inner, outer, 17, 16, area, out)

    return {"coverage_masks (6 borders)": cov, "tile_histogram (32x32)": hist_fn,
            "charge_tiles": charge, "display_stats": display, "build_region": build}


def session_seconds(backend, seconds):
    saved = geo._k
    geo._k = backend
    try:
        cfg = SimConfig(duration_s=seconds)
        fov = synthetic_fov_trace(seconds * 1000 + 2000, 0)
        bw = synthetic_bandwidth_trace(seconds * 1000 + 2000, 1)
        t = time.perf_counter()
        run_simulation(cfg, bw, fov)
        return time.perf_counter() - t
    finally:
        geo._k = saved


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--session-seconds", type=int, default=20)
    args = ap.parse_args()
    grid = geo.ErpGrid()
    backends = [("numpy", _kernels_py)] + ([("cython", _kernels)] if _kernels else [])
    print(f"{'kernel':<28}" + "".join(f"{name:>12}" for name, _ in backends) + "   (us per call)")
    for label, make in kernel_cases(grid, np.random.default_rng(0)).items():
        row = [per_call_us(make(k)) for _, k in backends]
        speed = f"   x{row[0] / row[1]:.1f}" if len(row) == 2 else ""
        print(f"{label:<28}" + "".join(f"{v:12.1f}" for v in row) + speed)
    row = [session_seconds(k, args.session_seconds) for _, k in backends]
    print(f"{f'session ({args.session_seconds} s)':<28}" + "".join(f"{v:11.2f}s" for v in row)
          + (f"   x{row[0] / row[1]:.1f}" if len(row) == 2 else ""))
    if _kernels is None:
        print("compiled extension not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
