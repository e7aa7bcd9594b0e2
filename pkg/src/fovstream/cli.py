"""Command-line entry point: ``fovstream <command> ...``.

Trace arguments accept a file path or a generator spec:

  FoV:        synthetic:SEED[:STYLE]      (STYLE: explore, static, sweep, pole)
  bandwidth:  synthetic:SEED[:MEAN_MBPS]  or  constant:MBPS

Exit codes: 0 ok, 1 validation error (bad input / config), 2 runtime error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .config import VARIANTS, ConfigError, SimConfig, load_config
from .metrics import MetricsError, aggregate_metrics, write_plot_series, write_table
from .predictors import (
    HarmonicBandwidth,
    HoldLastFov,
    ReplayError,
    RlsBandwidth,
    TruncatedLinearFov,
    fov_hit_rate_by_horizon,
    score_bandwidth,
)
from .quality import FitError, fit_kappa_model, fit_log_model, fit_rho_model, read_points_csv
from .sim import run_simulation, write_frame_log
from .traces import (
    FRAME_MS,
    BandwidthTrace,
    TraceError,
    flip_extend,
    kalman_smooth,
    parse_bandwidth_trace,
    parse_fov_trace,
    scale_bandwidth,
    synthetic_bandwidth_trace,
    synthetic_fov_trace,
    validate_bandwidth_file,
    validate_fov_file,
    write_bandwidth_trace,
    write_fov_trace,
)

log = logging.getLogger("fovstream")

VALIDATION_ERRORS = (ConfigError, TraceError, ReplayError, FitError, MetricsError, FileNotFoundError)
MARGIN_MS = 2000.0  # traces must outlast the session by the display tail


class UsageError(ValueError):
    pass


# --- trace loading --------------------------------------------------------------

def load_fov(spec: str, duration_ms: float, smooth: bool = True, strict: bool = True):
    need = duration_ms + MARGIN_MS
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        try:
            seed = int(parts[1])
        except (IndexError, ValueError):
            raise UsageError(f"bad FoV spec {spec!r}") from None
        style = parts[2] if len(parts) > 2 else "explore"
        try:
            tr = synthetic_fov_trace(need, seed, style)
        except ValueError as e:
            raise UsageError(str(e)) from None
    else:
        tr = parse_fov_trace(spec, strict=strict)
    if smooth:
        tr = kalman_smooth(tr)
    if tr.duration_ms < need:
        tr = flip_extend(tr, need)
    return tr


def load_bandwidth(spec: str, duration_ms: float, peak_mbps: float | None = None, strict: bool = True):
    need = duration_ms + MARGIN_MS
    parts = spec.split(":")
    try:
        if parts[0] == "constant":
            tr = BandwidthTrace.constant(float(parts[1]) * 1e6, need)
            tr.name = f"constant-{parts[1]}"
        elif parts[0] == "synthetic":
            mean = float(parts[2]) if len(parts) > 2 else 80.0
            tr = synthetic_bandwidth_trace(need, int(parts[1]), mean_mbps=mean)
        else:
            tr = parse_bandwidth_trace(spec, strict=strict)
    except (IndexError, ValueError) as e:
        if isinstance(e, TraceError):
            raise
        raise UsageError(f"bad bandwidth spec {spec!r}") from None
    if peak_mbps:
        tr = scale_bandwidth(tr, peak_mbps * 1e6)
    if tr.end_ms < need:
        raise TraceError(f"bandwidth trace {spec} ends at {tr.end_ms:.0f} ms, need {need:.0f} ms")
    return tr


def _config(args, **extra) -> SimConfig:
    over = dict(
        variant=getattr(args, "variant", None),
        duration_s=args.duration,
        seed=args.seed,
        quality_preset=getattr(args, "preset", None),
    )
    over.update(extra)
    return load_config(args.config, **over)


# --- commands -------------------------------------------------------------------

def _write_run(result, out_dir, fmt, stem=""):
    os.makedirs(out_dir, exist_ok=True)
    rep = result.report()
    ext = "csv" if fmt == "csv" else "jsonl"
    write_frame_log(result, os.path.join(out_dir, f"{stem}frames.{ext}"), fmt if fmt == "csv" else "jsonl")
    write_plot_series(result, os.path.join(out_dir, f"{stem}series.csv"))
    rep.to_json(os.path.join(out_dir, f"{stem}report.json"))
    return rep


def cmd_simulate(args) -> int:
    cfg = _config(args)
    fov = load_fov(args.fov_trace, cfg.duration_ms, not args.no_smooth, not args.lenient)
    bw = load_bandwidth(args.bw_trace, cfg.duration_ms, args.bw_peak, not args.lenient)
    res = run_simulation(cfg, bw, fov)
    rep = _write_run(res, args.out_dir, args.format)
    with open(os.path.join(args.out_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{cfg.variant}: WS-PSNR {rep.ws_psnr_in_fov:.2f} dB, delay {rep.avg_frame_delay:.1f} ms, "
          f"freeze {rep.freeze_frame_pct:.2f}%, hit {rep.hit_rate_total:.1f}%")
    return 0


def _sweep_job(job):
    cfg, fov_spec, bw_spec, smooth, peak, strict = job
    fov = load_fov(fov_spec, cfg.duration_ms, smooth, strict)
    bw = load_bandwidth(bw_spec, cfg.duration_ms, peak, strict)
    return run_simulation(cfg, bw, fov).report()


def cmd_sweep(args) -> int:
    base = _config(args)
    variants = args.variants or list(VARIANTS)
    fovs = list(args.fov_trace)
    if args.fov_dir:
        bw_path = os.path.abspath(args.bw_trace)
        fovs += [f for f in sorted(glob.glob(os.path.join(args.fov_dir, args.fov_glob)))
                 if os.path.abspath(f) != bw_path]
    if not fovs:
        raise UsageError("sweep needs at least one --fov-trace or --fov-dir")
    jobs, keys = [], []
    for v in variants:
        cfg = base.replace(variant=v)
        for i, f in enumerate(fovs):
            jobs.append((cfg, f, args.bw_trace, not args.no_smooth, args.bw_peak, not args.lenient))
            keys.append((v, i))
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as ex:
            reports = list(ex.map(_sweep_job, jobs))
    else:
        reports = [_sweep_job(j) for j in jobs]
    os.makedirs(args.out_dir, exist_ok=True)
    rows = {}
    for v in variants:
        mine = [(k, r) for k, r in zip(keys, reports) if k[0] == v]
        rows[v] = aggregate_metrics([r for _, r in mine], [k for k, _ in mine])
        for (_, i), r in mine:
            r.to_json(os.path.join(args.out_dir, f"{v}_{i:03d}_report.json"))
    ext = "json" if args.format == "json" else "csv"
    write_table(rows, os.path.join(args.out_dir, f"table.{ext}"), args.format)
    for v, r in rows.items():
        print(f"{v:>10}: WS-PSNR {r.ws_psnr_in_fov:6.2f} dB  delay {r.avg_frame_delay:6.1f} ms  "
              f"freeze {r.freeze_frame_pct:5.2f}%  hit {r.hit_rate_total:5.1f}%")
    return 0


def cmd_score_predictors(args) -> int:
    duration = args.duration * 1000.0
    out = {"fov": {}, "bandwidth": {}}
    horizons = tuple(args.horizons)
    for spec in args.fov_trace:
        tr = load_fov(spec, duration, not args.no_smooth, not args.lenient).at_frame_rate()
        xyz = tr.xyz[:int(duration / FRAME_MS) + max(horizons) + 1]
        out["fov"][spec] = {
            "truncated-linear": fov_hit_rate_by_horizon(TruncatedLinearFov(), xyz, horizons),
            "hold": fov_hit_rate_by_horizon(HoldLastFov(), xyz, horizons),
        }
    if args.bw_trace:
        bw = load_bandwidth(args.bw_trace, duration, args.bw_peak, not args.lenient)
        t = np.arange(3000.0, duration, 1000.0)
        actual = np.array([bw.capacity_between(s, s + 1000.0) for s in t])
        keep = actual > 0
        for name, pred in (("rls", RlsBandwidth()), ("harmonic", HarmonicBandwidth())):
            p = np.array([pred.predict(bw.bin_capacity(s)) for s in t])
            sc = score_bandwidth(p[keep], actual[keep])
            out["bandwidth"][name] = {"mape": sc.mape, "nmae": sc.nmae}
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "predictor_scores.json"), "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for spec, table in out["fov"].items():
        print(spec)
        for name, hr in table.items():
            print(f"  {name:>16}: " + "  ".join(f"h{h}={v:.3f}" for h, v in hr.items()))
    for name, sc in out["bandwidth"].items():
        print(f"{name:>10}: MAPE {sc['mape']:.3f}  NMAE {sc['nmae']:.3f}")
    return 0


def cmd_fit_models(args) -> int:
    pts = read_points_csv(args.points)
    if args.kind == "qr":
        m = fit_log_model(pts, args.region)
        d = {"kind": "qr", "region": args.region, "a": m.a, "b": m.b}
    elif args.kind == "rho":
        m = fit_rho_model(pts)
        d = {"kind": "rho", "c": m.c, "d": m.d}
    else:
        m = fit_kappa_model(pts)
        d = {"kind": "kappa", **{k: getattr(m, k) for k in m.__dataclass_fields__}}
    text = json.dumps(d, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_validate_trace(args) -> int:
    if not (args.fov_trace or args.bw_trace):
        raise UsageError("give --fov-trace and/or --bw-trace")
    problems = []
    for path in args.fov_trace:
        problems += [f"{path}: {p}" for p in validate_fov_file(path, strict=not args.lenient)]
    if args.bw_trace:
        problems += [f"{args.bw_trace}: {p}" for p in validate_bandwidth_file(args.bw_trace, strict=not args.lenient)]
    for p in problems:
        print("repaired:", p)
    print("ok" if not problems else f"ok after {len(problems)} repair(s)")
    return 0


def cmd_synth_traces(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    duration = args.duration * 1000.0 + MARGIN_MS
    for i in range(args.count):
        tr = synthetic_fov_trace(duration, args.seed + i, args.style)
        write_fov_trace(tr, os.path.join(args.out_dir, f"fov_{args.style}_{args.seed + i:03d}.csv"))
    bw = synthetic_bandwidth_trace(duration, args.seed, mean_mbps=args.mean_mbps, dropouts=args.dropouts)
    write_bandwidth_trace(bw, os.path.join(args.out_dir, f"bw_{args.seed:03d}.csv"))
    print(f"wrote {args.count} FoV trace(s) and 1 bandwidth trace to {args.out_dir}")
    return 0


# --- parser ---------------------------------------------------------------------

def _common(p, sim=True):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--duration", type=float, default=None, help="session length in seconds")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--format", choices=("json", "csv"), default="csv", help="frame log / table format")
    p.add_argument("--lenient", action="store_true", help="repair malformed trace rows instead of failing")
    p.add_argument("--no-smooth", action="store_true", help="skip Kalman smoothing of FoV traces")
    p.add_argument("--bw-peak", type=float, default=None, help="rescale bandwidth so its peak is this many Mbit/s")
    if sim:
        p.add_argument("--preset", default=None, help="quality model preset")


class _Parser(argparse.ArgumentParser):
    # bad arguments are a validation failure (exit 1), not argparse's usual 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fovstream", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fovstream {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one session")
    _common(p)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--fov-trace", required=True)
    p.add_argument("--bw-trace", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="variants x FoV traces on one bandwidth trace, averaged per variant")
    _common(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--fov-trace", action="append", default=[])
    p.add_argument("--fov-dir", help="directory of FoV trace CSVs")
    p.add_argument("--fov-glob", default="*.csv", help="file pattern inside --fov-dir")
    p.add_argument("--bw-trace", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("score-predictors", help="FoV hit rate vs horizon and bandwidth MAPE / NMAE")
    _common(p, sim=False)
    p.add_argument("--fov-trace", action="append", default=[])
    p.add_argument("--bw-trace")
    p.add_argument("--horizons", type=int, nargs="+", default=[1, 3, 5, 10, 15, 30])
    p.set_defaults(func=cmd_score_predictors)

    p = sub.add_parser("fit-models", help="fit a Q-R, rho or kappa model to CSV points")
    p.add_argument("--points", required=True, help="CSV of (rate, quality) or (tau, value) pairs")
    p.add_argument("--kind", choices=("qr", "rho", "kappa"), default="qr")
    p.add_argument("--region", default="PF")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_models)

    p = sub.add_parser("validate-trace", help="check trace files (strict unless --lenient)")
    p.add_argument("--fov-trace", action="append", default=[])
    p.add_argument("--bw-trace")
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_validate_trace)

    p = sub.add_parser("synth-traces", help="write synthetic FoV / bandwidth traces")
    p.add_argument("--out-dir", default="traces")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style", default="explore", choices=("explore", "static", "sweep", "pole"))
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--mean-mbps", type=float, default=80.0)
    p.add_argument("--dropouts", type=int, default=0)
    p.set_defaults(func=cmd_synth_traces)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "duration", 0) is None and args.command == "score-predictors":
        args.duration = 60.0
    try:
        return args.func(args)
    except (UsageError, *VALIDATION_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
