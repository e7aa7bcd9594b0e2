"""Evaluation metrics over a per-frame simulation log, plus aggregation and
plot-series export.

Frame 0 (the initial full-ERP intra frame) is left out of every per-frame
metric; it belongs to start-up buffering, not steady-state streaming.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .sim import STATUS_DELIVERED, STATUS_IN_FLIGHT, STATUS_LATE, STATUS_SKIPPED, SimResult

SCHEMA_VERSION = 1


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    ws_psnr_in_fov: float
    temporal_discontinuity: float
    spatial_discontinuity: float
    avg_frame_delay: float
    delay_std_over_mean: float
    freeze_frame_pct: float
    avg_freeze_duration: float
    display_interval_mean: float
    display_interval_std: float
    hit_rate_pf: float
    hit_rate_pfplus: float
    hit_rate_ri: float
    hit_rate_total: float
    delivery_rate: float
    n_encoded: int
    n_delivered: int
    n_sender_dropped: int
    n_deadline_dropped: int
    n_in_flight: int
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise MetricsError(f"report schema {d.get('schema_version')!r}, expected {SCHEMA_VERSION}")
        names = {f.name for f in fields(cls)}
        missing = names - set(d)
        if missing:
            raise MetricsError(f"report missing fields {sorted(missing)}")
        return cls(**{k: d[k] for k in names})

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


FLOAT_FIELDS = [f.name for f in fields(MetricsReport) if f.type in ("float", float)]
COUNT_FIELDS = [f.name for f in fields(MetricsReport) if f.name.startswith("n_")]
PCT_FIELDS = ("freeze_frame_pct", "hit_rate_pf", "hit_rate_pfplus", "hit_rate_ri", "hit_rate_total")


def _mean(x) -> float:
    return float(np.mean(x)) if len(x) else 0.0


def compute_metrics(result: SimResult) -> MetricsReport:
    frames = result.frames
    if not frames:
        raise MetricsError("empty frame log")
    counts = {STATUS_DELIVERED: 0, STATUS_SKIPPED: 0, STATUS_LATE: 0, STATUS_IN_FLIGHT: 0}
    for r in frames:
        counts[r.status] += 1
    shown = sorted((r for r in frames if r.status == STATUS_DELIVERED), key=lambda r: r.display_time)
    steady = [r for r in shown if r.frame_index > 0]

    q = np.array([r.rendered_quality for r in steady])
    delay = np.array([r.delay_ms for r in steady])
    temporal = _mean(np.abs(np.diff(q))) if len(q) > 1 else 0.0
    d_mean = _mean(delay)
    interval = np.diff([r.display_time for r in shown])

    poll = result.config.poll_ms
    runs = result.freeze_runs
    hits = np.array([[r.hit_pf, r.hit_pfplus, r.hit_ri] for r in steady]).reshape(-1, 3)
    h = hits.mean(axis=0) if len(hits) else np.zeros(3)
    # frames that should have been shown: all but those still in flight at the end
    due = len(frames) - counts[STATUS_IN_FLIGHT]

    rep = MetricsReport(
        ws_psnr_in_fov=_mean(q),
        temporal_discontinuity=temporal,
        spatial_discontinuity=_mean([r.spatial_disc for r in steady]),
        avg_frame_delay=d_mean,
        delay_std_over_mean=float(delay.std() / d_mean) if d_mean > 0 else 0.0,
        freeze_frame_pct=100.0 * sum(runs) / result.n_polls if result.n_polls else 0.0,
        avg_freeze_duration=_mean(runs) * poll,
        display_interval_mean=_mean(interval),
        display_interval_std=float(interval.std()) if len(interval) else 0.0,
        hit_rate_pf=100.0 * float(h[0]),
        hit_rate_pfplus=100.0 * float(h[1]),
        hit_rate_ri=100.0 * float(h[2]),
        hit_rate_total=100.0 * float(min(h.sum(), 1.0)),
        delivery_rate=counts[STATUS_DELIVERED] / due if due else 0.0,
        n_encoded=len(frames),
        n_delivered=counts[STATUS_DELIVERED],
        n_sender_dropped=counts[STATUS_SKIPPED],
        n_deadline_dropped=counts[STATUS_LATE],
        n_in_flight=counts[STATUS_IN_FLIGHT],
    )
    bad = [k for k in FLOAT_FIELDS if not math.isfinite(getattr(rep, k))]
    if bad:
        raise MetricsError(f"non-finite metrics: {bad}")
    return rep


def aggregate_metrics(reports, keys=None) -> MetricsReport:
    """Unweighted mean of per-trace reports (counts are summed).

    ``keys``, if given, orders the reports before reduction so the result
    does not depend on completion order.
    """
    reports = list(reports)
    if not reports:
        raise MetricsError("nothing to aggregate")
    if keys is not None:
        reports = [r for _, r in sorted(zip(keys, reports), key=lambda kv: kv[0])]
    out = {}
    for name in FLOAT_FIELDS:
        out[name] = float(np.mean([getattr(r, name) for r in reports]))
    for name in COUNT_FIELDS:
        out[name] = int(sum(getattr(r, name) for r in reports))
    return MetricsReport(**out)


# --- export -------------------------------------------------------------------

SERIES_FIELDS = ["segment", "t_ms", "bandwidth_bits", "predicted_bits", "budget_bits", "backlog_bits",
                 "mean_delay_ms", "delivery_rate", "border_deg", "ri_tiles", "r_e", "r_b"]


def plot_series(result: SimResult) -> list:
    """One row per segment: link capacity, prediction, delay, delivery and the chosen plan."""
    by_seg = {}
    for r in result.frames:
        by_seg.setdefault(r.segment, []).append(r)
    rows = []
    for s in result.segments:
        fr = by_seg.get(s["segment"], [])
        ok = [r.delay_ms for r in fr if r.status == STATUS_DELIVERED]
        done = [r for r in fr if r.status != STATUS_IN_FLIGHT]
        rows.append({
            "segment": s["segment"], "t_ms": s["t_ms"], "bandwidth_bits": s["actual_bits"],
            "predicted_bits": s["predicted_bits"], "budget_bits": s["budget_bits"],
            "backlog_bits": s["backlog_bits"], "mean_delay_ms": _mean(ok) if ok else math.nan,
            "delivery_rate": len(ok) / len(done) if done else math.nan,
            "border_deg": s["border_deg"], "ri_tiles": s["ri_tiles"], "r_e": s["r_e"], "r_b": s["r_b"],
        })
    return rows


def _cell(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def write_plot_series(result: SimResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_FIELDS)
        for row in plot_series(result):
            w.writerow([_cell(row[k]) for k in SERIES_FIELDS])


TABLE_COLUMNS = ["variant", "ws_psnr_in_fov", "temporal_discontinuity", "spatial_discontinuity",
                 "avg_frame_delay", "delay_std_over_mean", "freeze_frame_pct", "avg_freeze_duration",
                 "display_interval_mean", "display_interval_std", "hit_rate_pf", "hit_rate_pfplus",
                 "hit_rate_ri", "hit_rate_total"]


def write_table(rows: dict, path, fmt="csv"):
    """``rows`` maps variant -> aggregated MetricsReport; one output row per variant."""
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump({v: r.to_dict() for v, r in rows.items()}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for v, r in rows.items():
            w.writerow([v] + [repr(getattr(r, k)) for k in TABLE_COLUMNS[1:]])
