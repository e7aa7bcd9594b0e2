"""FoV and bandwidth traces: parsing, validation, smoothing, extension,
scaling, binning, and synthetic generators.

FoV CSV layouts (header row required):
  xyz     timestamp_ms,x,y,z
  angles  timestamp_ms,yaw,pitch              (degrees)
  quat    timestamp_ms,qw,qx,qy,qz            (rotates the forward axis)
  tsinghua  Unity-style quaternion log         (best effort)
  lonlat  timestamp_ms,lon,lat normalised to [0,1]   (best effort)

Bandwidth CSV layouts:
  packets timestamp_ms,bytes   packet arrival log, binned internally
  rate    timestamp_ms,rate_mbps  piecewise constant from each timestamp
"""

from __future__ import annotations

import bisect
import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import angles_to_vector, vector_to_angles

log = logging.getLogger(__name__)

FRAME_MS = 1000.0 / 30.0


class TraceError(ValueError):
    pass


class TraceWarning(UserWarning):
    pass


def _problem(msg, strict, fixes):
    if strict:
        raise TraceError(msg)
    warnings.warn(msg, TraceWarning, stacklevel=3)
    fixes.append(msg)


# --- FoV ----------------------------------------------------------------------

@dataclass
class FovTrace:
    timestamps: np.ndarray
    xyz: np.ndarray
    name: str = ""
    repairs: list = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        if len(xyz) != len(self.timestamps):
            raise TraceError("timestamps and samples differ in length")
        if len(xyz) == 0:
            raise TraceError("empty FoV trace")
        if np.any(np.diff(self.timestamps) <= 0):
            raise TraceError("FoV timestamps must be strictly increasing")
        norm = np.linalg.norm(xyz, axis=1)
        if np.any(norm < 1e-12):
            raise TraceError("zero-length orientation vector")
        # leave rows that are already unit alone so re-wrapping is bit-exact
        norm = np.where(np.abs(norm - 1.0) > 1e-12, norm, 1.0)
        self.xyz = xyz / norm[:, None]

    def __len__(self):
        return len(self.xyz)

    @property
    def duration_ms(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(self.timestamps[-1] - self.timestamps[0] + np.median(np.diff(self.timestamps)))

    @classmethod
    def from_xyz(cls, xyz, frame_ms=FRAME_MS, name=""):
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        return cls(np.arange(len(xyz)) * frame_ms, xyz, name)

    @classmethod
    def from_angles(cls, yaw_deg, pitch_deg, frame_ms=FRAME_MS, name=""):
        return cls.from_xyz(angles_to_vector(yaw_deg, pitch_deg), frame_ms, name)

    def at_frame_rate(self, frame_ms=FRAME_MS, duration_ms=None) -> "FovTrace":
        """Resample onto t0 + i*frame_ms by normalised linear interpolation."""
        t0 = self.timestamps[0]
        dur = self.duration_ms if duration_ms is None else duration_ms
        n = max(1, int(round(dur / frame_ms)))
        t = t0 + np.arange(n) * frame_ms
        if len(self) == 1:
            return FovTrace(t, np.repeat(self.xyz, n, axis=0), self.name)
        xyz = np.column_stack([np.interp(t, self.timestamps, self.xyz[:, k]) for k in range(3)])
        bad = np.linalg.norm(xyz, axis=1) < 1e-9
        if np.any(bad):  # antipodal neighbours: take the nearest sample
            idx = np.clip(np.searchsorted(self.timestamps, t[bad]), 0, len(self) - 1)
            xyz[bad] = self.xyz[idx]
        return FovTrace(t, xyz, self.name)

    def angles(self):
        return vector_to_angles(self.xyz)


def quat_forward(qw, qx, qy, qz):
    """Image of the x axis under unit quaternion (w, x, y, z)."""
    qw, qx, qy, qz = (np.asarray(a, dtype=float) for a in (qw, qx, qy, qz))
    n = np.sqrt(qw**2 + qx**2 + qy**2 + qz**2)
    qw, qx, qy, qz = qw / n, qx / n, qy / n, qz / n
    return np.column_stack([
        1.0 - 2.0 * (qy * qy + qz * qz),
        2.0 * (qx * qy + qw * qz),
        2.0 * (qx * qz - qw * qy),
    ])


def _unity_forward(qx, qy, qz, qw):
    # Unity: x right, y up, z forward (left handed); rotate (0,0,1)
    qx, qy, qz, qw = (np.asarray(a, dtype=float) for a in (qx, qy, qz, qw))
    fx = 2.0 * (qx * qz + qw * qy)
    fy = 2.0 * (qy * qz - qw * qx)
    fz = 1.0 - 2.0 * (qx * qx + qy * qy)
    return np.column_stack([fz, -fx, fy])


_FOV_COLUMNS = {
    "xyz": ("timestamp_ms", "x", "y", "z"),
    "angles": ("timestamp_ms", "yaw", "pitch"),
    "quat": ("timestamp_ms", "qw", "qx", "qy", "qz"),
    "lonlat": ("timestamp_ms", "lon", "lat"),
    "tsinghua": ("PlaybackTime", "UnitQuaternion.x", "UnitQuaternion.y", "UnitQuaternion.z", "UnitQuaternion.w"),
}


def _sniff_fov(header):
    h = set(header)
    for fmt in ("tsinghua", "quat", "xyz", "angles", "lonlat"):
        if set(_FOV_COLUMNS[fmt]) <= h:
            return fmt
    raise TraceError(f"cannot infer FoV format from header {header}")


def _read_numeric(path, cols, strict, fixes):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        header = [c.strip() for c in (reader.fieldnames or [])]
        reader.fieldnames = header
        missing = [c for c in cols if c not in header]
        if missing:
            raise TraceError(f"{path}: missing columns {missing}")
        for ln, row in enumerate(reader, 2):
            try:
                vals = [float(row[c]) for c in cols]
            except (TypeError, ValueError):
                _problem(f"{path}:{ln}: malformed row", strict, fixes)
                continue
            if not all(math.isfinite(v) for v in vals):
                _problem(f"{path}:{ln}: non-finite value", strict, fixes)
                continue
            rows.append(vals)
    if not rows:
        raise TraceError(f"{path}: no data rows")
    return np.array(rows)


def _monotone(t, strict, fixes, path):
    keep = np.ones(len(t), dtype=bool)
    last = -np.inf
    for i, ti in enumerate(t):
        if ti <= last:
            keep[i] = False
        else:
            last = ti
    if not keep.all():
        _problem(f"{path}: {int((~keep).sum())} non-increasing timestamp(s)", strict, fixes)
    return keep


def parse_fov_trace(path, fmt="auto", strict=True, frame_ms=None, name=None) -> FovTrace:
    fixes: list = []
    if fmt == "auto":
        with open(path, newline="") as fh:
            header = [c.strip() for c in next(csv.reader(fh), [])]
        fmt = _sniff_fov(header)
    if fmt not in _FOV_COLUMNS:
        raise TraceError(f"unknown FoV format {fmt!r}")
    a = _read_numeric(path, _FOV_COLUMNS[fmt], strict, fixes)
    t = a[:, 0]
    if fmt == "xyz":
        xyz = a[:, 1:4]
    elif fmt == "angles":
        xyz = angles_to_vector(a[:, 1], a[:, 2])
    elif fmt == "quat":
        xyz = quat_forward(a[:, 1], a[:, 2], a[:, 3], a[:, 4])
    elif fmt == "tsinghua":
        t = t * 1000.0
        xyz = _unity_forward(a[:, 1], a[:, 2], a[:, 3], a[:, 4])
    else:  # lonlat: u=0 at lon -180, v=0 at the north pole
        xyz = angles_to_vector(a[:, 1] * 360.0 - 180.0, 90.0 - a[:, 2] * 180.0)
    norm = np.linalg.norm(xyz, axis=1)
    ok = norm > 1e-12
    if not ok.all():
        _problem(f"{path}: {int((~ok).sum())} zero-length orientation(s)", strict, fixes)
    keep = ok.copy()
    keep[ok] = _monotone(t[ok], strict, fixes, path)
    tr = FovTrace(t[keep], xyz[keep], name or str(path))
    tr.repairs = fixes
    if frame_ms is not None:
        tr = tr.at_frame_rate(frame_ms)
        tr.repairs = fixes
    return tr


def write_fov_trace(trace: FovTrace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_FOV_COLUMNS["xyz"])
        for t, v in zip(trace.timestamps, trace.xyz):
            w.writerow([repr(float(t))] + [repr(float(c)) for c in v])


def kalman_smooth(trace: FovTrace, q: float = 1e-4, r: float = 1e-2) -> FovTrace:
    """Per-axis constant-velocity Kalman filter plus RTS smoother, then renormalise."""
    z = trace.xyz
    n = len(z)
    if n < 2:
        return FovTrace(trace.timestamps.copy(), z.copy(), trace.name)
    F = np.array([[1.0, 1.0], [0.0, 1.0]])
    Q = q * np.array([[1.0 / 3.0, 0.5], [0.5, 1.0]])
    H = np.array([1.0, 0.0])
    # covariances and gains do not depend on the data, so all three axes share them
    xf = np.zeros((n, 2, 3))
    Pf = np.zeros((n, 2, 2))
    Pp = np.zeros((n, 2, 2))
    x = np.vstack([z[0], np.zeros(3)])
    P = np.diag([r, 1.0])
    for k in range(n):
        if k > 0:
            x = F @ x
            P = F @ P @ F.T + Q
        Pp[k] = P
        S = H @ P @ H + r
        K = P @ H / S
        x = x + np.outer(K, z[k] - x[0])
        P = P - np.outer(K, H @ P)
        xf[k] = x
        Pf[k] = P
    xs = xf.copy()
    for k in range(n - 2, -1, -1):
        C = Pf[k] @ F.T @ np.linalg.inv(Pp[k + 1])
        xs[k] = xf[k] + C @ (xs[k + 1] - F @ xf[k])
    return FovTrace(trace.timestamps.copy(), xs[:, 0, :], trace.name)


def flip_extend(trace: FovTrace, target_ms: float, frame_ms: float | None = None) -> FovTrace:
    """trace, reversed trace, trace, ... cut to round(target_ms / frame) samples."""
    n = len(trace)
    if n == 0:
        raise TraceError("empty trace")
    dt = frame_ms or (float(np.median(np.diff(trace.timestamps))) if n > 1 else FRAME_MS)
    m = max(1, int(round(target_ms / dt)))
    period = np.concatenate([np.arange(n), np.arange(n - 1, -1, -1)])
    idx = period[np.arange(m) % len(period)]
    return FovTrace(trace.timestamps[0] + np.arange(m) * dt, trace.xyz[idx], trace.name)


# --- bandwidth ------------------------------------------------------------------

@dataclass
class BandwidthTrace:
    """Piecewise-constant capacity: ``bits[i]`` deliverable in [edges[i], edges[i+1])."""

    edges: np.ndarray
    bits: np.ndarray
    name: str = ""
    repairs: list = field(default_factory=list)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.bits = np.asarray(self.bits, dtype=float)
        if len(self.edges) != len(self.bits) + 1 or len(self.bits) == 0:
            raise TraceError("need len(edges) == len(bits) + 1 >= 2")
        if np.any(np.diff(self.edges) <= 0):
            raise TraceError("bandwidth intervals must have positive length")
        if np.any(self.bits < 0) or not np.all(np.isfinite(self.bits)):
            raise TraceError("bandwidth bits must be finite and >= 0")
        self._cum = np.concatenate([[0.0], np.cumsum(self.bits)])
        # python lists for the scalar fast path
        self._edges_l = self.edges.tolist()
        self._cum_l = self._cum.tolist()
        self._bits_l = self.bits.tolist()

    @classmethod
    def from_rates(cls, rates_bps, interval_ms=100.0, t0=0.0, name=""):
        rates = np.asarray(rates_bps, dtype=float)
        edges = t0 + np.arange(len(rates) + 1) * interval_ms
        return cls(edges, rates * interval_ms / 1000.0, name)

    @classmethod
    def constant(cls, rate_bps, duration_ms, interval_ms=1000.0):
        n = max(1, int(math.ceil(duration_ms / interval_ms)))
        return cls.from_rates(np.full(n, float(rate_bps)), interval_ms)

    @property
    def start_ms(self) -> float:
        return float(self.edges[0])

    @property
    def end_ms(self) -> float:
        return float(self.edges[-1])

    @property
    def duration_ms(self) -> float:
        return self.end_ms - self.start_ms

    @property
    def rates_bps(self) -> np.ndarray:
        return self.bits / np.diff(self.edges) * 1000.0

    def cumulative(self, t):
        """Bits deliverable from the start of the trace up to time t."""
        if isinstance(t, float):
            return self._cum_at(t)
        return np.interp(t, self.edges, self._cum)

    def _cum_at(self, t: float) -> float:
        # scalar np.interp, same formula
        xp, fp = self._edges_l, self._cum_l
        if t <= xp[0]:
            return fp[0]
        if t >= xp[-1]:
            return fp[-1]
        j = bisect.bisect_right(xp, t) - 1
        if t == xp[j]:
            return fp[j]
        slope = (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j])
        return slope * (t - xp[j]) + fp[j]

    def capacity_between(self, t0, t1) -> float:
        return float(self.cumulative(t1) - self.cumulative(t0))

    def time_to_deliver(self, t0: float, bits: float) -> float:
        """Earliest t >= t0 with capacity_between(t0, t) >= bits, or inf past the trace."""
        if bits <= 0:
            return t0
        cum, edges = self._cum_l, self._edges_l
        target = float(self.cumulative(float(t0))) + bits
        if target > cum[-1] * (1 + 1e-15) + 1e-9:
            return math.inf
        i = bisect.bisect_left(cum, target)
        i = min(max(i, 1), len(cum) - 1)
        lo = cum[i - 1]
        seg = self._bits_l[i - 1]
        frac = 1.0 if seg <= 0 else min(max((target - lo) / seg, 0.0), 1.0)
        t = edges[i - 1] + frac * (edges[i] - edges[i - 1])
        return max(t, t0)

    def bin_capacity(self, t_end: float, n_bins: int = 15, bin_ms: float = 200.0) -> np.ndarray:
        """Capacity in the n_bins windows of length bin_ms ending at t_end (clipped at trace start)."""
        t = t_end - bin_ms * np.arange(n_bins, -1, -1)
        t = t[t >= self.start_ms - 1e-9]
        if len(t) < 2:
            return np.zeros(0)
        return np.diff(self.cumulative(t))


_BW_COLUMNS = {"packets": ("timestamp_ms", "bytes"), "rate": ("timestamp_ms", "rate_mbps")}


def parse_bandwidth_trace(path, fmt="auto", strict=True, bin_ms=10.0, name=None) -> BandwidthTrace:
    fixes: list = []
    if fmt == "auto":
        with open(path, newline="") as fh:
            header = [c.strip() for c in next(csv.reader(fh), [])]
        fmt = "rate" if "rate_mbps" in header else "packets"
    if fmt not in _BW_COLUMNS:
        raise TraceError(f"unknown bandwidth format {fmt!r}")
    a = _read_numeric(path, _BW_COLUMNS[fmt], strict, fixes)
    neg = a[:, 1] < 0
    if neg.any():
        _problem(f"{path}: {int(neg.sum())} negative value(s)", strict, fixes)
        a = a[~neg]
    if fmt == "packets":
        t = a[:, 0]
        if np.any(np.diff(t) < 0):
            _problem(f"{path}: packet timestamps out of order", strict, fixes)
            a = a[np.argsort(t, kind="stable")]
            t = a[:, 0]
        t0 = math.floor(t[0] / bin_ms) * bin_ms
        nb = int(math.floor((t[-1] - t0) / bin_ms)) + 1
        idx = np.minimum(((t - t0) // bin_ms).astype(np.int64), nb - 1)
        bits = np.bincount(idx, weights=a[:, 1] * 8.0, minlength=nb)
        edges = t0 + np.arange(nb + 1) * bin_ms
    else:
        keep = _monotone(a[:, 0], strict, fixes, path)
        a = a[keep]
        t = a[:, 0]
        step = float(np.median(np.diff(t))) if len(t) > 1 else 1000.0
        edges = np.append(t, t[-1] + step)
        bits = a[:, 1] * 1e6 * np.diff(edges) / 1000.0
    tr = BandwidthTrace(edges, bits, name or str(path))
    tr.repairs = fixes
    return tr


def write_bandwidth_trace(trace: BandwidthTrace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_BW_COLUMNS["rate"])
        for t, r in zip(trace.edges[:-1], trace.rates_bps):
            w.writerow([repr(float(t)), repr(float(r) / 1e6)])


def scale_bandwidth(trace: BandwidthTrace, target_peak_bps: float) -> BandwidthTrace:
    peak = float(trace.rates_bps.max())
    if peak <= 0:
        raise TraceError("cannot scale an all-zero bandwidth trace")
    return BandwidthTrace(trace.edges.copy(), trace.bits * (target_peak_bps / peak), trace.name)


def bin_throughput(times_ms, bits, t0: float, t1: float, bin_ms: float = 200.0) -> np.ndarray:
    """Delivered bits per bin over [t0, t1); events outside are ignored."""
    n = int(math.ceil((t1 - t0) / bin_ms - 1e-9))
    if n <= 0:
        return np.zeros(0)
    t = np.asarray(times_ms, dtype=float)
    b = np.asarray(bits, dtype=float)
    keep = (t >= t0) & (t < t1)
    idx = np.minimum(((t[keep] - t0) // bin_ms).astype(np.int64), n - 1)
    return np.bincount(idx, weights=b[keep], minlength=n)


# --- synthetic traces -------------------------------------------------------------

def _min_jerk(u):
    return u**3 * (10.0 - 15.0 * u + 6.0 * u * u)


def synthetic_fov_trace(duration_ms: float, seed: int = 0, style: str = "explore",
                        frame_ms: float = FRAME_MS, speed_deg: float = 15.0,
                        turn_rate: float = 0.4) -> FovTrace:
    """Synthetic head motion.

    ``style``:
      explore  slow Ornstein-Uhlenbeck drift (``speed_deg`` deg/s scale) plus
               quick head turns arriving at ``turn_rate`` per second, each a
               minimum-jerk move of 30-120 deg yaw over 0.25-0.6 s
      static   fixed pose
      pole     dwell around pitch 82 deg with slow yaw wander
      sweep    constant yaw rate ``speed_deg`` on the equator
    """
    rng = np.random.default_rng(seed)
    n = max(2, int(round(duration_ms / frame_ms)))
    dt = frame_ms / 1000.0
    if style == "static":
        yaw = np.full(n, rng.uniform(-180, 180))
        pitch = np.full(n, rng.uniform(-20, 20))
    elif style == "sweep":
        yaw = (speed_deg * dt * np.arange(n) + 180.0) % 360.0 - 180.0
        pitch = np.zeros(n)
    elif style == "pole":
        wob = np.cumsum(rng.normal(0, 0.5, n))
        yaw = rng.uniform(-180, 180) + 0.4 * wob
        pitch = 82.0 + 5.0 * np.sin(np.arange(n) * dt * 0.7 + rng.uniform(0, 6))
    elif style == "explore":
        a = math.exp(-dt / 0.8)
        s = math.sqrt(1 - a * a)
        vy = np.zeros(n)
        vp = np.zeros(n)
        for k in range(1, n):
            vy[k] = a * vy[k - 1] + s * rng.normal(0, speed_deg)
            vp[k] = a * vp[k - 1] + s * rng.normal(0, speed_deg * 0.4)
        yaw = np.cumsum(vy) * dt
        dp = vp * dt
        t = 0.0
        total = n * dt
        while True:
            t += rng.exponential(1.0 / turn_rate) if turn_rate > 0 else total
            if t >= total:
                break
            k0 = int(t / dt)
            length = max(2, int(rng.uniform(0.25, 0.6) / dt))
            amp = rng.uniform(30, 120) * rng.choice([-1.0, 1.0])
            u = np.clip((np.arange(k0, n) - k0) / length, 0.0, 1.0)
            yaw[k0:] += amp * _min_jerk(u)
            pamp = rng.normal(0, 12)
            prof = np.diff(_min_jerk(np.clip((np.arange(k0 - 1, n) - k0) / length, 0.0, 1.0)))
            dp[k0:] += pamp * prof
        yaw = yaw + rng.uniform(-180, 180)
        pitch = np.zeros(n)
        p = rng.uniform(-15, 15)
        for k in range(n):
            p = p + dp[k] - 0.01 * p  # weak pull to the horizon
            pitch[k] = p
        pitch = np.clip(pitch, -75, 75)
    else:
        raise ValueError(f"unknown synthetic FoV style {style!r}")
    return FovTrace.from_angles(yaw, pitch, frame_ms, f"synthetic-{style}-{seed}")


def synthetic_bandwidth_trace(duration_ms: float, seed: int = 0, mean_mbps: float = 80.0,
                              peak_mbps: float = 200.0, cv: float = 0.6, interval_ms: float = 100.0,
                              dropouts: int = 0, dropout_ms: float = 1500.0) -> BandwidthTrace:
    """Log-normal AR(1) capacity with optional zero-rate dropouts, scaled to ``peak_mbps``."""
    rng = np.random.default_rng(seed)
    n = max(1, int(math.ceil(duration_ms / interval_ms)))
    rho = math.exp(-interval_ms / 2000.0)
    sig = math.sqrt(math.log(1 + cv * cv))
    e = np.zeros(n)
    for k in range(1, n):
        e[k] = rho * e[k - 1] + math.sqrt(1 - rho * rho) * rng.normal()
    rate = np.exp(sig * e - 0.5 * sig * sig) * mean_mbps
    rate = np.minimum(rate, peak_mbps)
    for _ in range(dropouts):
        start = rng.integers(0, n)
        rate[start:start + int(dropout_ms / interval_ms)] = 0.0
    tr = BandwidthTrace.from_rates(rate * 1e6, interval_ms, name=f"synthetic-bw-{seed}")
    if peak_mbps and tr.rates_bps.max() > 0:
        tr = scale_bandwidth(tr, peak_mbps * 1e6)
        tr.name = f"synthetic-bw-{seed}"
    return tr


def validate_fov_file(path, fmt="auto", strict=True) -> list:
    """List of problems (empty when the file is clean)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TraceWarning)
        tr = parse_fov_trace(path, fmt, strict=strict)
    return tr.repairs


def validate_bandwidth_file(path, fmt="auto", strict=True) -> list:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TraceWarning)
        tr = parse_bandwidth_trace(path, fmt, strict=strict)
    return tr.repairs
