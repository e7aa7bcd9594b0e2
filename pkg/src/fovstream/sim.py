"""Trace-driven simulation of the push pipeline: encode tick, sender FIFO,
fluid network drain, in-order decode, and a display buffer polled every
1/3 frame interval.

The loop walks frame slots in order.  Everything the sender decides at its
tick ``n*T`` uses only information available by then: FoV samples older
than the propagation delay, display feedback older than the propagation
delay, and its own buffer state.  Because every encoded frame is eventually
decoded in order (no loss), the receiver's tile ledger after decoding frame
``n`` equals the sender's ledger right after encoding it; a copy is kept
with each frame until it is displayed or dropped.
"""

from __future__ import annotations

import csv
import gc
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np

from . import geometry as geo
from .allocator import (
    AllocationInputs,
    SegmentPlan,
    frame_bit_budget,
    frame_budget,
    lapse_distribution_from_counts,
    lapse_distribution_from_samples,
    plan_segment,
    segment_budget,
)
from .config import SimConfig
from .geometry import REGION_NONE, REGION_PF, REGION_PFPLUS, REGION_RI, ErpGrid, FovPose
from .predictors import (
    FixedBandwidth,
    HarmonicBandwidth,
    HoldLastFov,
    OracleBandwidth,
    OracleFov,
    ReplayBandwidth,
    ReplayFov,
    RlsBandwidth,
    TruncatedLinearFov,
)
from .quality import PSNR_CAP, LogQrModel, QualityModelSet, kappa, lapse_factor, load_presets, rho
from .traces import BandwidthTrace, FovTrace, TraceError

EPS = 1e-9

STATUS_DELIVERED = "delivered"
STATUS_SKIPPED = "sender_overflow"
STATUS_LATE = "deadline"
STATUS_IN_FLIGHT = "in_flight"


# --- ledger, charging, rendering ----------------------------------------------------

class TileLedger:
    """Per tile: frame index and quality (dB) when last coded."""

    def __init__(self, total: int, frame: int = -1, quality: float = 0.0):
        self.last_frame = np.full(total, frame, dtype=np.int64)
        self.quality = np.full(total, float(quality))

    def lapse(self, frame_index: int) -> np.ndarray:
        return frame_index - self.last_frame

    def stamp(self, mask, frame_index: int, quality):
        self.last_frame[mask] = frame_index
        self.quality[mask] = np.broadcast_to(quality, self.quality.shape)[mask]

    def snapshot(self):
        return self.last_frame.copy(), self.quality.copy()


@dataclass(frozen=True)
class FrameRates:
    """Encoder target rates (bits/deg^2) and Q-R curves per region."""

    pf: float
    pfplus: float
    ri: float
    pf_model: LogQrModel
    pfplus_model: LogQrModel
    ri_model: LogQrModel
    pf_inter: bool = True
    pfplus_inter: bool = True


def _clip_q(q):
    return min(max(q, 0.0), PSNR_CAP)


def lapse_table(fn, model, size: int, start: int = 0) -> np.ndarray:
    """``fn(model, tau)`` tabulated for integer tau in [start, size); NaN below ``start``."""
    out = np.full(size, np.nan)
    out[start:] = fn(model, np.arange(start, size, dtype=float))
    return out


def _lookup(fn, model, tau):
    # model may be a pre-tabulated array (see lapse_table)
    if isinstance(model, np.ndarray):
        return model[tau]
    return fn(model, tau)


def charge_frame_bits(layout: geo.RegionLayout, rates: FrameRates, ledger: TileLedger,
                      frame_index: int, rho_model, lapse_counts=None) -> float:
    """Bits for one frame; inter-coded tiles pay rho(tau).  Stamps coded tiles in ``ledger``.

    ``rho_model`` is a RateIncreaseModel or its lapse_table.

    ``lapse_counts``, if given, is a pair of int64 arrays indexed by tau that
    count the lapses of PF and PF+ tiles at their coding instant.
    """
    taus = frame_index - ledger.last_frame
    size = int(taus.max()) + 1
    rho_tab = rho_model if isinstance(rho_model, np.ndarray) else lapse_table(rho, rho_model, size, start=1)
    if lapse_counts is None:
        lapse_counts = (np.zeros(size, dtype=np.int64), np.zeros(size, dtype=np.int64))
    q_lut = (0.0, _clip_q(rates.pf_model.quality(rates.pf)),
             _clip_q(rates.pfplus_model.quality(rates.pfplus)), _clip_q(rates.ri_model.quality(rates.ri)))
    return geo._k.charge_tiles(
        layout.region, ledger.last_frame, ledger.quality, layout.grid.tile_area, frame_index,
        (0.0, rates.pf, rates.pfplus, rates.ri), q_lut, (False, rates.pf_inter, rates.pfplus_inter, False),
        rho_tab, lapse_counts[0], lapse_counts[1])


def render_tiles(last_frame, quality, frame_index, kappa_model) -> np.ndarray:
    """Current per-tile quality after decay since each tile was last coded.

    ``kappa_model`` is a QualityDecayModel or its lapse_table.
    """
    return _lookup(kappa, kappa_model, frame_index - last_frame) * quality


def rendered_quality(actual: FovPose | np.ndarray, ledger: TileLedger, frame_displayed: int,
                     kappa_model, grid: ErpGrid | None = None, samples_per_axis: int = geo.DEFAULT_SAMPLES):
    """(viewport quality, per-tile qualities).

    ``actual`` is either a pose (weights from its tile histogram) or an
    explicit per-tile weight vector.
    """
    if isinstance(actual, FovPose):
        w = geo.tile_histogram(actual, grid, samples_per_axis)
    else:
        w = np.asarray(actual, dtype=float)
        w = w / w.sum()
    tq = render_tiles(ledger.last_frame, ledger.quality, frame_displayed, kappa_model)
    return float(w @ tq), tq


@lru_cache(maxsize=16)
def _neighbour_pairs(rows: int, cols: int):
    idx = np.arange(rows * cols).reshape(rows, cols)
    if cols > 2:
        h = (idx, np.roll(idx, -1, axis=1))
    else:  # with 1 or 2 columns the wrap adds no new pair
        h = (idx[:, :-1], idx[:, 1:])
    a = np.concatenate([h[0].ravel(), idx[:-1].ravel()])
    b = np.concatenate([h[1].ravel(), idx[1:].ravel()])
    return a, b


def spatial_discontinuity(tile_q, in_fov, rows: int, cols: int) -> float:
    """Mean |q_a - q_b| over 4-neighbour tile pairs inside the viewport (columns wrap)."""
    q = np.asarray(tile_q, dtype=float).ravel()
    m = np.asarray(in_fov, dtype=bool).ravel()
    a, b = _neighbour_pairs(rows, cols)
    sel = m[a] & m[b]
    n = int(np.count_nonzero(sel))
    return float(np.abs(q[a[sel]] - q[b[sel]]).sum() / n) if n else 0.0


# --- segment statistics ---------------------------------------------------------

@dataclass
class SegmentStats:
    gamma: float = 1.0
    alpha_pf: float = 0.9
    alpha_pfplus: dict = field(default_factory=dict)
    alpha_ri: dict = field(default_factory=dict)
    lapse_dist: dict = field(default_factory=lambda: {1: 1.0})
    lapse_dist_pfplus: dict | None = None
    throughput: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_samples: int = 0
    alpha_pf_by_ri: dict = field(default_factory=dict)  # k -> alpha_pf with RI block carved out
    alpha_pfplus_by_ri: dict = field(default_factory=dict)  # (border, k) -> alpha_pf+


def collect_segment_stats(statuses, hists, inner_masks, border_masks, ri_masks,
                          pf_taus=(), pfplus_taus=(), throughput=None) -> SegmentStats:
    """Measured delivery rate, hit rates and lapse distributions for one segment.

    ``statuses``: outcome of each frame slot (delivered / other).
    ``hists``: actual-viewport tile histograms for the replayed frames, paired
    with ``inner_masks`` (PF tiles of the predicted viewport), ``border_masks``
    ({border: mask}) and ``ri_masks`` ({k: mask}).  RI tiles take precedence
    over PF / PF+, as in the coded layout: alpha_ri(k) counts every hit in the
    block, and the PF / PF+ rates per RI candidate exclude it.  ``alpha_pf``
    and ``alpha_pfplus`` are also reported without any RI carve-out.
    """
    statuses = list(statuses)
    gamma = sum(s == STATUS_DELIVERED for s in statuses) / len(statuses) if statuses else 1.0
    st = SegmentStats(gamma=gamma)
    if len(hists):
        H = np.asarray(hists, dtype=float)
        inner = np.asarray(inner_masks, dtype=bool)
        bs = list(border_masks[0]) if border_masks else []
        ks = list(ri_masks[0]) if ri_masks else []
        nf, nt = H.shape
        rings = np.array([[m[b] for m in border_masks] for b in bs], dtype=bool).reshape(len(bs), nf, nt) & ~inner
        blocks = np.array([[m[k] for m in ri_masks] for k in ks], dtype=bool).reshape(len(ks), nf, nt)
        # mean over frames of the histogram mass inside each mask
        hit = lambda masks: np.clip(np.einsum("...ft,ft->...", masks, H) / nf, 0.0, 1.0)
        st.alpha_pf = float(hit(inner))
        pf_k = hit(inner[None] & ~blocks)
        pp_bk = hit(rings[:, None] & ~blocks[None])
        st.alpha_pfplus = dict(zip(bs, hit(rings).tolist()))
        st.alpha_ri = dict(zip(ks, hit(blocks).tolist()))
        st.alpha_pf_by_ri = dict(zip(ks, pf_k.tolist()))
        st.alpha_pfplus_by_ri = {(b, k): float(pp_bk[i, j]) for i, b in enumerate(bs) for j, k in enumerate(ks)}
        st.n_samples = nf
    st.lapse_dist = lapse_distribution_from_samples(pf_taus)
    st.lapse_dist_pfplus = lapse_distribution_from_samples(pfplus_taus)
    if throughput is not None:
        st.throughput = np.asarray(throughput, dtype=float)
    return st


# --- records ------------------------------------------------------------------------

@dataclass(slots=True)
class FrameRecord:
    frame_index: int
    segment: int
    status: str = STATUS_IN_FLIGHT
    drop_reason: str = ""
    encode_start: float = math.nan
    encode_end: float = math.nan
    size_bits: float = 0.0
    send_start: float = math.nan
    send_end: float = math.nan
    arrival_time: float = math.nan
    decode_end: float = math.nan
    display_time: float = math.nan
    delay_ms: float = math.nan
    occupancy: int = 0
    budget_bits: float = math.nan
    border_deg: float = 0.0
    ri_tiles: int = 0
    rate_pf: float = math.nan
    rate_b: float = math.nan
    horizon: int = 0
    pred_yaw: float = math.nan
    pred_pitch: float = math.nan
    shown_index: int = -1
    rendered_quality: float = math.nan
    spatial_disc: float = math.nan
    hit_pf: float = math.nan
    hit_pfplus: float = math.nan
    hit_ri: float = math.nan
    freeze_polls_before: int = 0


LOG_FIELDS = [f.name for f in fields(FrameRecord)]


@dataclass
class SimResult:
    config: SimConfig
    frames: list
    segments: list
    n_polls: int = 0
    freeze_runs: list = field(default_factory=list)
    max_occupancy: int = 0
    fov_name: str = ""
    bw_name: str = ""

    @property
    def variant(self) -> str:
        return self.config.variant

    def report(self):
        """MetricsReport for this run."""
        from .metrics import compute_metrics
        return compute_metrics(self)

    def counts(self) -> dict:
        c = {STATUS_DELIVERED: 0, STATUS_SKIPPED: 0, STATUS_LATE: 0, STATUS_IN_FLIGHT: 0}
        for r in self.frames:
            c[r.status] += 1
        c["encoded"] = len(self.frames)
        return c


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_frame_log(result: SimResult, path, fmt: str = "csv"):
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for r in result.frames:
                w.writerow([_fmt(getattr(r, k)) for k in LOG_FIELDS])
    elif fmt in ("jsonl", "json"):
        with open(path, "w") as fh:
            for r in result.frames:
                d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(r).items()}
                fh.write(json.dumps(d, sort_keys=True) + "\n")
    else:
        raise ValueError(f"unknown log format {fmt!r}")


# --- the session ----------------------------------------------------------------------

def _pose(v, h, w) -> FovPose:
    v = np.asarray(v, dtype=float)
    v = v / math.sqrt(float(v @ v))
    return FovPose(float(v[0]), float(v[1]), float(v[2]), h, w)


def make_fov_predictor(cfg: SimConfig, xyz):
    name = cfg.fov_predictor
    if name == "truncated-linear":
        return TruncatedLinearFov(cfg.fov_threshold_deg, cfg.fov_window, cfg.max_horizon)
    if name == "oracle":
        return OracleFov(xyz)
    if name == "hold":
        return HoldLastFov()
    if name == "replay":
        return ReplayFov(cfg.fov_replay)
    raise ValueError(f"unknown FoV predictor {name!r}")


def make_bw_predictor(cfg: SimConfig, trace):
    name = cfg.bw_predictor
    if name == "rls":
        return RlsBandwidth(window=cfg.bw_history_bins)
    if name == "harmonic":
        return HarmonicBandwidth(window=cfg.bw_history_bins)
    if name == "oracle":
        return OracleBandwidth(trace)
    if name == "fixed":
        return FixedBandwidth(cfg.initial_bw_mbps * 1e6)
    if name == "replay":
        return ReplayBandwidth(cfg.bw_replay)
    raise ValueError(f"unknown bandwidth predictor {name!r}")


def _models_for(cfg: SimConfig) -> QualityModelSet:
    sets = load_presets(cfg.presets_file)
    if cfg.quality_preset not in sets:
        raise ValueError(f"unknown quality preset {cfg.quality_preset!r} (have {sorted(sets)})")
    return sets[cfg.quality_preset]


class Session:
    def __init__(self, cfg: SimConfig, fov, bw: BandwidthTrace, models: QualityModelSet | None = None,
                 fov_predictor=None, bw_predictor=None):
        cfg.validate()
        self.cfg = cfg
        self.grid = ErpGrid(cfg.width_px, cfg.height_px, cfg.tile_px)
        self.T = cfg.frame_ms
        self.n_frames = max(1, int(math.floor(cfg.duration_ms / self.T + EPS)))
        xyz = fov.xyz if isinstance(fov, FovTrace) else np.asarray(fov, dtype=float)
        if len(xyz) < self.n_frames:
            raise TraceError(f"FoV trace has {len(xyz)} samples, session needs {self.n_frames}")
        if bw.end_ms < cfg.duration_ms - EPS or bw.start_ms > EPS:
            raise TraceError(f"bandwidth trace covers [{bw.start_ms}, {bw.end_ms}] ms, "
                             f"session needs [0, {cfg.duration_ms}]")
        self.xyz = xyz / np.linalg.norm(xyz, axis=1, keepdims=True)
        self.bw = bw
        self.models = models or _models_for(cfg)
        need = {"proposed": cfg.borders, "simplified": [cfg.simplified_border],
                "bm3": [cfg.bm3_border]}.get(cfg.variant, [])
        self.models.check_borders(need)
        self.fov_pred = fov_predictor or make_fov_predictor(cfg, self.xyz)
        self.bw_pred = bw_predictor or make_bw_predictor(cfg, bw)
        self.fov_name = getattr(fov, "name", "")
        self.hist_cache = lru_cache(maxsize=512)(self._hist)
        self.cov_cache = lru_cache(maxsize=4096)(self._cov)
        self.pair_cache = lru_cache(maxsize=1024)(self._pair)
        self.n_tiles = self.grid.total
        self.a_erp = float(self.grid.tile_area.sum())
        self.all_tiles = np.ones(self.n_tiles, dtype=bool)
        self.no_tiles = np.zeros(self.n_tiles, dtype=bool)
        self.pose_cache = lru_cache(maxsize=1024)(
            lambda x, y, z: FovPose(x, y, z, cfg.h_extent, cfg.v_extent))

    # geometry helpers
    def _hist(self, idx: int):
        v = self.xyz[idx]
        p = self.pose_cache(float(v[0]), float(v[1]), float(v[2]))
        return geo.tile_histogram(p, self.grid, self.cfg.hist_samples)

    def _cov(self, key):
        x, y, z, border = key
        p = self.pose_cache(x, y, z)
        if border:
            p = p.widened(border)
        return geo.coverage_mask(p, self.grid, self.cfg.coverage_samples)

    def coverage(self, v, border=0.0):
        return self.cov_cache((float(v[0]), float(v[1]), float(v[2]), float(border)))

    def coverage_pair(self, v, border):
        """(inner, widened) masks for one predicted direction, from one kernel call."""
        return self.pair_cache((float(v[0]), float(v[1]), float(v[2]), float(border)))

    def _pair(self, key):
        x, y, z, border = key
        inner, outer = geo.coverage_masks(self.pose_cache(x, y, z), (0.0, border), self.grid,
                                          self.cfg.coverage_samples)
        return inner, outer

    # ---------------------------------------------------------------------------
    def run(self) -> SimResult:
        # the loop allocates many small containers and frees none of them
        # cyclically; generational GC passes over the growing record list
        # would make long sessions superlinear
        gc_on = gc.isenabled()
        gc.disable()
        try:
            return self._run()
        finally:
            if gc_on:
                gc.enable()

    def _run(self) -> SimResult:
        cfg, T, grid = self.cfg, self.T, self.grid
        N = cfg.frames_per_segment
        total = grid.total
        self.ledger = TileLedger(total)
        self.tq_buf = np.empty(total)
        # a tile's lapse never exceeds n_frames + 1 (ledger starts at frame -1)
        self.rho_tab = lapse_table(rho, self.models.rho, self.n_frames + 2, start=1)
        self.kappa_tab = lapse_table(kappa, self.models.kappa, self.n_frames + 2)
        self.records = []
        self.segments = []
        self.pending = {}  # frame -> (last_frame, quality, region)
        self.queue = deque()  # encoded frames not yet displayed / dropped
        self.unsent = deque()  # (encode_end, send_start, send_end, size) still in the sender buffer
        self.last_send_end = 0.0
        self.last_decode_end = 0.0
        self.ri_cursor = 0
        # display state
        self.poll_k = 0
        self.first_display = None
        self.last_display = None
        self.freeze_run = 0
        self.freeze_runs = []
        self.n_polls = 0
        self.feedback = []  # (display_time, delay) in display order
        self.fb_ptr = -1
        self.max_occupancy = 0
        # per-segment history for replay
        self.seg_frames = []  # dicts for coded frames of the current segment
        self.prev_seg_frames = []
        self._reset_lapses()
        self.stats = None
        self.plan = None
        spent = 0.0
        b_s = 0.0
        seg_start = 0
        default_delay = cfg.encode_time + cfg.propagation_ms + cfg.decode_time + cfg.poll_ms / 2

        for n in range(self.n_frames):
            t = n * T
            self._advance_display(t)
            if n % N == 0:
                seg_start = n
                b_s = self._start_segment(n, t)
                spent = 0.0
            j = n - seg_start
            occ = self._occupancy(t)
            self.max_occupancy = max(self.max_occupancy, occ)
            rec = FrameRecord(n, n // N, occupancy=occ, encode_start=t)
            rec.border_deg, rec.ri_tiles = self._region_sizes()
            bt = frame_budget(b_s, spent, j, N, occ, cfg.sender_capacity, cfg.a_param, cfg.b_param)
            if bt is None:
                rec.status = STATUS_SKIPPED
                rec.drop_reason = STATUS_SKIPPED
                rec.encode_start = math.nan
                self.records.append(rec)
                continue
            rec.budget_bits = bt

            # FoV prediction for the expected display instant
            est = self._estimated_delay(t, default_delay)
            known = min(max(int(math.floor((t - cfg.propagation_ms) / T + EPS)), 0), len(self.xyz) - 1)
            target = int(math.floor((t + est) / T + EPS))
            h = min(max(target - known, 1), self.fov_pred.max_horizon, cfg.max_horizon)
            hist_win = self.xyz[max(0, known + 1 - cfg.fov_window):known + 1]
            pv = np.asarray(self.fov_pred.predict(hist_win, h, known)[h - 1], dtype=float)
            pv = pv / math.sqrt(float(pv @ pv))
            rec.horizon = h
            rec.pred_yaw = math.degrees(math.atan2(pv[1], pv[0]))
            rec.pred_pitch = math.degrees(math.asin(min(1.0, max(-1.0, float(pv[2])))))

            layout, rates, meta = self._frame_layout(n, j, bt, b_s, pv)
            rec.rate_pf, rec.rate_b = meta["rate_pf"], meta["rate_b"]
            rec.border_deg, rec.ri_tiles = meta["border"], meta["ri"]
            bits = charge_frame_bits(layout, rates, self.ledger, n, self.rho_tab, self.lapse_counts)
            spent += bits

            # sender FIFO, fluid drain, propagation, in-order decode
            enc_end = t + cfg.encode_time
            send_start = max(enc_end, self.last_send_end)
            send_end = self.bw.time_to_deliver(send_start, bits)
            self.last_send_end = send_end
            arrival = send_end + cfg.propagation_ms
            decode_end = max(arrival, self.last_decode_end) + cfg.decode_time
            self.last_decode_end = decode_end
            rec.encode_end, rec.size_bits = enc_end, bits
            rec.send_start, rec.send_end = send_start, send_end
            rec.arrival_time, rec.decode_end = arrival, decode_end
            self.records.append(rec)
            self.unsent.append((enc_end, send_start, send_end, bits))
            lf, q = self.ledger.snapshot()
            self.pending[n] = (lf, q, layout.region)
            self.queue.append(n)
            self.seg_frames.append({
                "n": n, "j": j, "pv": pv, "target": target, "inner": meta.get("inner"),
                "ri_base": self.seg_ri_start,
            })

        self._advance_display(cfg.duration_ms)
        if self.freeze_run:
            self.freeze_runs.append(self.freeze_run)
        for n in self.queue:
            self.records[n].status = STATUS_IN_FLIGHT
        return SimResult(cfg, self.records, self.segments, self.n_polls, self.freeze_runs,
                         self.max_occupancy, self.fov_name, self.bw.name)

    def _reset_lapses(self):
        # tau-indexed counts of PF / PF+ lapses coded in the current segment
        self.lapse_counts = (np.zeros(self.n_frames + 2, dtype=np.int64), np.zeros(self.n_frames + 2, dtype=np.int64))

    # ---------------------------------------------------------------------------
    def _region_sizes(self):
        v = self.cfg.variant
        if v in ("proposed", "simplified") and self.plan is not None:
            return float(self.plan.border_deg), int(self.plan.ri_tile_count)
        if v == "bm2":
            return float(self.cfg.bm2_border), 0
        if v == "bm3":
            return float(self.cfg.bm3_border), 0
        return 0.0, 0

    def _occupancy(self, t):
        while self.unsent and self.unsent[0][2] <= t + EPS:
            self.unsent.popleft()
        return sum(1 for e in self.unsent if e[0] <= t + EPS)

    def _backlog(self, t):
        left = 0.0
        for enc_end, s0, s1, bits in self.unsent:
            if enc_end > t + EPS or s1 <= t + EPS:
                continue
            if s0 >= t:
                left += bits
            else:
                left += max(bits - self.bw.capacity_between(s0, t), 0.0)
        return left

    def _estimated_delay(self, t, default):
        fb = self.feedback
        i = self.fb_ptr
        while i + 1 < len(fb) and fb[i + 1][0] + self.cfg.propagation_ms <= t + EPS:
            i += 1
        self.fb_ptr = i
        return fb[i][1] if i >= 0 else default

    # ---------------------------------------------------------------------------
    def _advance_display(self, t):
        cfg, T = self.cfg, self.T
        poll = cfg.poll_ms
        max_age = cfg.max_display_delay_frames * T
        while self.poll_k * poll <= t + EPS:
            p = self.poll_k * poll
            self.poll_k += 1
            q = self.queue
            while q and self.records[q[0]].decode_end <= p + EPS and p - q[0] * T > max_age + EPS:
                n = q.popleft()
                r = self.records[n]
                r.status = STATUS_LATE
                r.drop_reason = STATUS_LATE
                self.pending.pop(n, None)
            shown = False
            if q and self.records[q[0]].decode_end <= p + EPS:
                self._display(q.popleft(), p)
                shown = True
            if self.first_display is None:
                continue
            self.n_polls += 1
            if shown:
                if self.freeze_run:
                    self.freeze_runs.append(self.freeze_run)
                self.freeze_run = 0
            elif p - self.last_display >= T - EPS:
                self.freeze_run += 1

    def _display(self, n, p):
        cfg, T, grid = self.cfg, self.T, self.grid
        r = self.records[n]
        r.status = STATUS_DELIVERED
        r.display_time = p
        r.delay_ms = p - r.encode_start
        r.freeze_polls_before = self.freeze_run
        if self.first_display is None:
            self.first_display = p
        self.last_display = p
        self.feedback.append((p, r.delay_ms))
        lf, q, region = self.pending.pop(n)
        idx = min(int(math.floor(p / T + EPS)), len(self.xyz) - 1)
        r.shown_index = idx
        hist = self.hist_cache(idx)
        pa, pb = _neighbour_pairs(grid.rows, grid.cols)
        (r.rendered_quality, r.spatial_disc, r.hit_pf, r.hit_pfplus,
         r.hit_ri) = geo._k.display_stats(hist, lf, q, n, self.kappa_tab, region, pa, pb, self.tq_buf)

    # ---------------------------------------------------------------------------
    def _start_segment(self, n, t):
        cfg = self.cfg
        N = cfg.frames_per_segment
        s = n // N
        if s > 0:
            self.stats = self._measure(t)
        self.prev_seg_frames = self.seg_frames
        self.seg_frames = []
        self._reset_lapses()
        samples = self.bw.bin_capacity(t, cfg.bw_history_bins, cfg.bw_bin_ms)
        if len(samples) == 0:
            predicted = cfg.initial_bw_mbps * 1e6
        else:
            predicted = float(self.bw_pred.predict(samples, s, t))
        backlog = self._backlog(t)
        b_s = segment_budget(predicted, backlog, cfg.eta)
        self.seg_budget = b_s
        self.seg_ri_start = self.ri_cursor
        plan = None
        if cfg.variant in ("proposed", "simplified"):
            plan = self._plan(max(b_s / N, 1.0))
        self.plan = plan
        st = self.stats or SegmentStats()
        self.segments.append({
            "segment": s, "t_ms": t, "predicted_bits": predicted, "actual_bits": self.bw.capacity_between(t, t + 1000.0),
            "backlog_bits": backlog, "budget_bits": b_s, "gamma": st.gamma, "alpha_pf": st.alpha_pf,
            "border_deg": plan.border_deg if plan else self._region_sizes()[0],
            "ri_tiles": plan.ri_tile_count if plan else 0,
            "r_e": plan.r_e if plan else math.nan, "r_b": plan.r_b if plan else math.nan,
            "expected_quality": plan.expected_quality if plan else math.nan,
            "lapse_factor": plan.pf_rate_factor if plan else math.nan,
        })
        return b_s

    def _candidates(self):
        cfg = self.cfg
        if cfg.variant == "simplified":
            return [int(cfg.simplified_border)], [int(cfg.simplified_ri)]
        return [int(b) for b in cfg.borders], [int(k) for k in cfg.ri_sizes]

    def _plan(self, budget_bt) -> SegmentPlan:
        cfg = self.cfg
        borders, ris = self._candidates()
        st = self.stats
        if st is None:
            # cold start: prior hit rate for PF, the rest spread by nominal area;
            # a sweeping RI block of k tiles takes k/total of the viewport on average
            a0 = cfg.alpha_pf_prior
            total = self.grid.total
            big = geo.nominal_border_area(max(borders), cfg.h_extent, cfg.v_extent)
            app = {b: (1 - a0) * geo.nominal_border_area(b, cfg.h_extent, cfg.v_extent) / big for b in borders}
            st = SegmentStats(1.0, a0, app, {k: k / total for k in ris})
            st.alpha_pf_by_ri = {k: a0 * (1 - k / total) for k in ris}
            st.alpha_pfplus_by_ri = {(b, k): a * (1 - k / total) for b, a in app.items() for k in ris}
        apf = st.alpha_pf_by_ri or st.alpha_pf
        app = {**st.alpha_pfplus, **st.alpha_pfplus_by_ri}
        inputs = AllocationInputs(
            gamma=st.gamma, alpha_pf=apf, alpha_pfplus=app, alpha_ri=st.alpha_ri,
            budget_bt=budget_bt, models=self.models, lapse_dist=st.lapse_dist,
            lapse_dist_pfplus=st.lapse_dist_pfplus, borders=borders, ri_sizes=ris,
            a_pf=cfg.h_extent * cfg.v_extent, h_extent=cfg.h_extent, v_extent=cfg.v_extent,
            total_tiles=self.grid.total,
        )
        self.inputs = inputs
        return plan_segment(inputs)

    def _measure(self, t) -> SegmentStats:
        cfg, T = self.cfg, self.T
        N = cfg.frames_per_segment
        n0 = int(round(t / T))
        seen = t - cfg.propagation_ms
        max_age = cfg.max_display_delay_frames * T
        statuses = []
        for r in self.records[max(0, n0 - N):n0]:
            if r.status == STATUS_SKIPPED:
                statuses.append(r.status)
            elif r.status == STATUS_DELIVERED and r.display_time <= seen + EPS:
                statuses.append(r.status)
            elif r.status == STATUS_LATE or seen - r.frame_index * T > max_age + EPS:
                statuses.append(STATUS_LATE)
        if not statuses and self.stats is not None:
            statuses = None
        known = int(math.floor(seen / T + EPS))
        hists, inners, borders_m, ris_m = [], [], [], []
        if cfg.variant in ("proposed", "simplified"):
            borders, ris = self._candidates()
            frames = [f for f in self.prev_seg_frames + self.seg_frames
                      if f["target"] <= known and f["inner"] is not None][-N:]
            frames = frames[::-1][::cfg.replay_stride][::-1]
            for f in frames:
                idx = min(f["target"], len(self.xyz) - 1)
                hists.append(self.hist_cache(idx))
                inners.append(f["inner"])
                pv = f["pv"]
                masks = geo.coverage_masks(self.pose_cache(float(pv[0]), float(pv[1]), float(pv[2])),
                                           borders, self.grid, cfg.coverage_samples)
                borders_m.append(dict(zip(borders, masks)))
                rm = {}
                for k in ris:
                    # where candidate k's block will sit at this slot of the next segment
                    m = np.zeros(self.grid.total, dtype=bool)
                    m[geo.ri_block(self.ri_cursor + f["j"] * k, k, self.grid.total)] = True
                    rm[k] = m
                ris_m.append(rm)
        st = collect_segment_stats(statuses or [], hists, inners, borders_m, ris_m)
        st.lapse_dist = lapse_distribution_from_counts(self.lapse_counts[0])
        st.lapse_dist_pfplus = lapse_distribution_from_counts(self.lapse_counts[1])
        if statuses is None:
            st.gamma = self.stats.gamma
        if not hists:
            prev = self.stats
            if prev is not None:
                st.alpha_pf, st.alpha_pfplus, st.alpha_ri = prev.alpha_pf, prev.alpha_pfplus, prev.alpha_ri
                st.alpha_pf_by_ri, st.alpha_pfplus_by_ri = prev.alpha_pf_by_ri, prev.alpha_pfplus_by_ri
            else:
                st.alpha_pf = cfg.alpha_pf_prior
        if cfg.variant in ("proposed", "simplified") and not st.alpha_pfplus:
            borders, ris = self._candidates()
            st.alpha_pfplus = {b: 0.0 for b in borders}
            st.alpha_ri = {k: 0.0 for k in ris}
        return st

    # ---------------------------------------------------------------------------
    def _frame_layout(self, n, j, bt, b_s, pv):
        cfg, grid, m = self.cfg, self.grid, self.models
        v = cfg.variant
        total = self.n_tiles
        a_erp = self.a_erp
        meta = {"rate_pf": math.nan, "rate_b": math.nan, "border": 0.0, "ri": 0}
        full, none = self.all_tiles, self.no_tiles

        def intra_all(rate):
            lay = geo.RegionLayout.from_masks(grid, none, none, full)
            meta.update(rate_pf=rate, rate_b=rate, border=0.0, ri=total)
            return lay, FrameRates(rate, rate, rate, m.ri, m.ri, m.ri, False, False), meta

        if v == "bm3" and j == 0:
            N = cfg.frames_per_segment
            ip = cfg.bm3_ip_ratio
            ring = geo.nominal_border_area(cfg.bm3_border, cfg.h_extent, cfg.v_extent) + cfg.h_extent * cfg.v_extent
            r_p = b_s / (ip * a_erp + (N - 1) * ring)
            return intra_all(ip * r_p)
        if n == 0:
            if v in ("proposed", "simplified"):
                return intra_all(self.plan.r_b)
            return intra_all(bt / a_erp)

        if v == "bm1":
            mask = geo.vertical_slice_mask(_pose(pv, cfg.h_extent, cfg.v_extent), grid, cfg.bm1_width_deg)
            lay = geo.RegionLayout.from_masks(grid, mask, none, none)
            r = bt / lay.a_pf
            meta.update(rate_pf=r, rate_b=r)
            return lay, FrameRates(r, r, r, m.ri, m.ri, m.ri, False, False), meta

        if v in ("bm2", "bm3"):
            border = cfg.bm2_border if v == "bm2" else cfg.bm3_border
            inner, outer = self.coverage_pair(pv, border)
            lay = self._layout(inner, outer, 0, 0, border)
            r = bt / (lay.a_pf + lay.a_pfplus)
            meta.update(rate_pf=r, rate_b=r, border=float(border), inner=inner)
            if v == "bm2":
                return lay, FrameRates(r, r, r, m.ri, m.ri, m.ri, False, False), meta
            f = self._lapse_factor()
            return lay, FrameRates(r / f, r / f, r, m.pf, m.pfplus_for(border), m.ri), meta

        # proposed / simplified
        plan = self.plan
        border, k = plan.border_deg, plan.ri_tile_count
        inner, outer = self.coverage_pair(pv, border)
        off = self.ri_cursor
        self.ri_cursor = (self.ri_cursor + k) % total
        lay = self._layout(inner, outer, off, k, border)
        denom = lay.a_pf * plan.r_e + (lay.a_pfplus + lay.a_ri) * plan.r_b
        s = bt / denom if denom > 0 else 0.0
        re, rb = s * plan.r_e, s * plan.r_b
        meta.update(rate_pf=re, rate_b=rb, border=float(border), ri=k, inner=inner, ri_offset=off)
        rates = FrameRates(re / plan.pf_rate_factor, rb / plan.pfplus_rate_factor, rb,
                           m.pf, m.pfplus_for(border), m.ri)
        return lay, rates, meta

    def _layout(self, inner, outer, ri_start, k, border):
        # RI block of k tiles from ri_start (raster order, wrapping), then PF, then PF+
        region = np.empty(self.n_tiles, dtype=np.int8)
        a_pf, a_pp, a_ri = geo._k.build_region(inner.view(np.uint8), outer.view(np.uint8), ri_start, k,
                                               self.grid.tile_area, region)
        lam = 1.0 - k / self.n_tiles
        return geo.RegionLayout(self.grid, region, a_pf, a_pp, a_ri, lam, lam, border, k)

    def _lapse_factor(self):
        st = self.stats
        return 1.0 if st is None else lapse_factor(st.lapse_dist, self.models.rho)


def run_simulation(config: SimConfig, bandwidth_trace: BandwidthTrace, fov_trace, system_variant: str | None = None,
                   models: QualityModelSet | None = None, fov_predictor=None, bw_predictor=None) -> SimResult:
    cfg = config if system_variant is None else config.replace(variant=system_variant)
    return Session(cfg, fov_trace, bandwidth_trace, models, fov_predictor, bw_predictor).run()


def run_benchmark(variant: str, config: SimConfig, bandwidth_trace, fov_trace, **kw) -> SimResult:
    if variant not in ("bm1", "bm2", "bm3"):
        raise ValueError(f"benchmark variant must be bm1, bm2 or bm3, got {variant!r}")
    return run_simulation(config, bandwidth_trace, fov_trace, variant, **kw)
