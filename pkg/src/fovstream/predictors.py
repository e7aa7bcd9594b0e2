"""FoV and bandwidth predictors, a CSV replay adapter, and accuracy scores.

FoV predictors work on (n, 3) arrays of unit vectors, newest sample last,
and return (H, 3) arrays for horizons 1..H.  Bandwidth predictors take the
recent 200 ms throughput samples (bits per bin) and return the predicted
bits for the next second.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import DEFAULT_SAMPLES, FovPose, fov_overlap

STEPS_PER_SEGMENT = 5
HM_FLOOR = 1e-9


class ReplayError(ValueError):
    pass


def _unit_rows(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# --- FoV ----------------------------------------------------------------------

class FovPredictor:
    max_horizon = 60

    def predict(self, history: np.ndarray, horizon: int, index: int | None = None) -> np.ndarray:
        raise NotImplementedError


def _suffix_fit(hist, threshold_rad):
    """Linear fit (intercept at t=0, slope per step) over the longest recent
    suffix whose fitted directions all stay within ``threshold_rad`` of the
    samples.  Suffix lengths grow from 2 and stop at the first failure.
    """
    n = len(hist)
    t = np.arange(-n + 1, 1, dtype=float)
    # sums over the last L samples, for L = 1..n
    rev = slice(None, None, -1)
    s1 = np.cumsum(t[rev])
    s2 = np.cumsum((t * t)[rev])
    sy = np.cumsum(hist[rev], axis=0)
    sty = np.cumsum((t[:, None] * hist)[rev], axis=0)
    L = np.arange(1, n + 1, dtype=float)[1:, None]
    s1, s2, sy, sty = s1[1:, None], s2[1:, None], sy[1:], sty[1:]
    slope = (L * sty - s1 * sy) / (L * s2 - s1 * s1)
    icpt = (sy - slope * s1) / L
    # fitted direction at every position for every suffix length
    fit = icpt[:, None, :] + slope[:, None, :] * t[None, :, None]
    fit /= np.linalg.norm(fit, axis=2, keepdims=True)
    cosang = np.clip(np.einsum("lkc,kc->lk", fit, hist), -1.0, 1.0)
    inside = t[None, :] > -L  # position belongs to the suffix
    dev = np.where(inside, np.arccos(cosang), 0.0).max(axis=1)
    bad = np.nonzero(dev[1:] > threshold_rad)[0]  # L = 2 always accepted
    i = len(dev) - 1 if len(bad) == 0 else bad[0]
    return np.stack([icpt[i], slope[i]])


@dataclass
class TruncatedLinearFov(FovPredictor):
    threshold_deg: float = 0.02
    window: int = 30
    max_horizon: int = 60

    def predict(self, history, horizon, index=None):
        hist = np.asarray(history, dtype=float)[-self.window:]
        if len(hist) == 0:
            raise ValueError("empty FoV history")
        if len(hist) < 2:
            return np.repeat(_unit_rows(hist[-1:]), horizon, axis=0)
        coef = _suffix_fit(hist, math.radians(self.threshold_deg))
        # always evaluate the full horizon so a row never depends on how many
        # were asked for (vectorised norms round differently by length)
        h = np.arange(1, max(horizon, self.max_horizon) + 1, dtype=float)
        pts = coef[0][None, :] + h[:, None] * coef[1][None, :]
        bad = np.linalg.norm(pts, axis=1) < 1e-12
        pts[bad] = hist[-1]
        return _unit_rows(pts)[:horizon]


class HoldLastFov(FovPredictor):
    def predict(self, history, horizon, index=None):
        return np.repeat(_unit_rows(np.asarray(history, dtype=float)[-1:]), horizon, axis=0)


class OracleFov(FovPredictor):
    """Looks the answer up in the ground-truth trace (index = latest known sample)."""

    def __init__(self, xyz):
        self.xyz = _unit_rows(xyz)
        self.max_horizon = 10**9

    def predict(self, history, horizon, index=None):
        if index is None:
            index = len(history) - 1
        idx = np.minimum(index + np.arange(1, horizon + 1), len(self.xyz) - 1)
        return self.xyz[idx]


def truncated_linear_fov(history, horizon: int, threshold_deg: float = 0.02, window: int = 30):
    """Poses for horizons 1..horizon."""
    ext = (90.0, 90.0)
    if isinstance(history, Sequence) and history and isinstance(history[0], FovPose):
        h = np.array([p.vector for p in history])
        ext = (history[0].h_extent, history[0].v_extent)
    else:
        h = np.asarray(history, dtype=float)
    out = TruncatedLinearFov(threshold_deg, window).predict(h, horizon)
    return [FovPose.from_vector(v, *ext) for v in out]


# --- bandwidth ----------------------------------------------------------------

class BandwidthPredictor:
    def predict(self, samples, index: int | None = None, t_ms: float | None = None) -> float:
        raise NotImplementedError


@dataclass
class RlsBandwidth(BandwidthPredictor):
    forgetting: float = 0.98
    p0: float = 100.0
    window: int = 15

    def predict(self, samples, index=None, t_ms=None):
        return rls_bandwidth(samples, self.forgetting, self.p0, self.window)


@dataclass
class HarmonicBandwidth(BandwidthPredictor):
    window: int = 15

    def predict(self, samples, index=None, t_ms=None):
        return harmonic_mean_bandwidth(samples, self.window)


@dataclass
class FixedBandwidth(BandwidthPredictor):
    """Always predicts ``bits_per_second`` (e.g. an encoder pinned to a target rate)."""

    bits_per_second: float

    def predict(self, samples, index=None, t_ms=None):
        return float(self.bits_per_second)


class OracleBandwidth(BandwidthPredictor):
    """Exact capacity of the next second, read from the trace."""

    def __init__(self, trace):
        self.trace = trace

    def predict(self, samples, index=None, t_ms=None):
        return float(self.trace.capacity_between(t_ms, t_ms + 1000.0))


def rls_bandwidth(samples, forgetting=0.98, p0=100.0, window=15) -> float:
    y = np.asarray(samples, dtype=float)[-window:]
    if len(y) == 0:
        return 0.0
    scale = float(np.max(np.abs(y)))
    if scale == 0.0:
        return 0.0
    y = y / scale
    theta = np.array([y[0], 0.0])
    P = p0 * np.eye(2)
    for k, yk in enumerate(y):
        x = np.array([1.0, float(k)])
        Px = P @ x
        gain = Px / (forgetting + x @ Px)
        theta = theta + gain * (yk - x @ theta)
        P = (P - np.outer(gain, Px)) / forgetting
    n = len(y)
    steps = np.arange(n, n + STEPS_PER_SEGMENT, dtype=float)
    pred = np.maximum(theta[0] + theta[1] * steps, 0.0)
    return float(pred.sum() * scale)


def harmonic_mean_bandwidth(samples, window=15) -> float:
    y = np.asarray(samples, dtype=float)[-window:]
    if len(y) == 0:
        return 0.0
    y = np.maximum(y, HM_FLOOR)
    return float(STEPS_PER_SEGMENT * len(y) / np.sum(1.0 / y))


# --- replay -------------------------------------------------------------------

def _load_replay(path, width):
    table = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"index", "horizon", "payload"} <= set(reader.fieldnames):
            raise ReplayError(f"{path}: header must contain index,horizon,payload")
        for ln, row in enumerate(reader, 2):
            try:
                i, h = int(row["index"]), int(row["horizon"])
                vals = [float(v) for v in row["payload"].split()]
            except (TypeError, ValueError):
                raise ReplayError(f"{path}:{ln}: malformed row") from None
            if len(vals) != width or h < 1:
                raise ReplayError(f"{path}:{ln}: expected horizon >= 1 and {width} payload value(s)")
            if (i, h) in table:
                raise ReplayError(f"{path}:{ln}: duplicate key ({i}, {h})")
            table[i, h] = vals
    by_index = {}
    for i, h in table:
        by_index.setdefault(i, []).append(h)
    for i, hs in by_index.items():
        hs.sort()
        if hs != list(range(1, len(hs) + 1)):
            raise ReplayError(f"{path}: index {i} has non-contiguous horizons {hs[:5]}...")
    return table, {i: len(hs) for i, hs in by_index.items()}


class ReplayFov(FovPredictor):
    def __init__(self, path):
        self.table, self.depth = _load_replay(path, 3)
        self.max_horizon = min(self.depth.values()) if self.depth else 0

    def predict(self, history, horizon, index=None):
        if index is None:
            index = len(history) - 1
        try:
            rows = [self.table[index, h] for h in range(1, horizon + 1)]
        except KeyError as e:
            raise ReplayError(f"no recorded prediction for (index, horizon) = {e.args[0]}") from None
        return np.array(rows)


class ReplayBandwidth(BandwidthPredictor):
    def __init__(self, path):
        self.table, _ = _load_replay(path, 1)

    def predict(self, samples, index=None, t_ms=None):
        try:
            return max(self.table[index, 1][0], 0.0)
        except KeyError:
            raise ReplayError(f"no recorded bandwidth prediction for segment {index}") from None


def replay_predictor(path, kind="fov"):
    if kind == "fov":
        return ReplayFov(path)
    if kind == "bandwidth":
        return ReplayBandwidth(path)
    raise ValueError(f"unknown replay kind {kind!r}")


def export_fov_predictions(predictor: FovPredictor, xyz, max_horizon: int, path, window: int = 30):
    """Run ``predictor`` over every prefix of ``xyz`` and write a replay file."""
    xyz = _unit_rows(xyz)  # same renormalisation the simulator applies on load
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "horizon", "payload"])
        for i in range(len(xyz)):
            pred = predictor.predict(xyz[max(0, i + 1 - window):i + 1], max_horizon, i)
            for h, p in enumerate(pred, 1):
                w.writerow([i, h, " ".join(repr(float(v)) for v in p)])


def export_bandwidth_predictions(preds: Sequence[float], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "horizon", "payload"])
        for i, p in enumerate(preds):
            w.writerow([i, 1, repr(float(p))])


# --- scores -------------------------------------------------------------------

@dataclass
class PredictionScore:
    mape: float = float("nan")
    nmae: float = float("nan")
    hit_rate: dict | None = None


def score_bandwidth(predictions, actuals) -> PredictionScore:
    p = np.asarray(predictions, dtype=float)
    a = np.asarray(actuals, dtype=float)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {a.shape}")
    if len(a) == 0 or np.any(a <= 0):
        raise ValueError("actual bandwidth must be positive")
    err = np.abs(p - a)
    return PredictionScore(float(np.mean(np.minimum(err / a, 1.0))), float(err.sum() / a.sum()))


def score_fov(predicted, actual, horizon=None, samples_per_axis: int = 64) -> float:
    """Mean viewport overlap between aligned predicted and actual poses."""
    if len(predicted) != len(actual):
        raise ValueError("predicted and actual sequences differ in length")
    if not len(actual):
        return float("nan")
    vals = [fov_overlap(p, a, samples_per_axis) for p, a in zip(predicted, actual)]
    return float(np.mean(vals))


def fov_hit_rate_by_horizon(predictor: FovPredictor, xyz, horizons=(1, 3, 5, 10, 15, 30),
                            stride: int = 10, window: int = 30, samples_per_axis: int = 32,
                            extent=(90.0, 90.0)) -> dict:
    """Hit rate (viewport overlap) versus horizon over a trace."""
    xyz = _unit_rows(xyz)
    H = max(horizons)
    out = {h: [] for h in horizons}
    for i in range(1, len(xyz) - H, stride):
        pred = predictor.predict(xyz[max(0, i + 1 - window):i + 1], H, i)
        for h in horizons:
            p = FovPose.from_vector(pred[h - 1], *extent)
            a = FovPose.from_vector(xyz[i + h], *extent)
            out[h].append(fov_overlap(p, a, samples_per_axis))
    return {h: float(np.mean(v)) if v else float("nan") for h, v in out.items()}
