"""Segment-level region size / rate planning and frame-level bit budgets.

Areas used for normalisation are nominal square-degree areas (90x90 PF,
(90+b)^2 - 90^2 border, k mean-size tiles of RI), so a plan depends only on
the candidate sizes and never on where the viewport happens to sit.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import SPHERE_DEG2, nominal_border_area
from .quality import RATE_FLOOR, QualityModelSet, kappa, lapse_factor

DEFAULT_BORDERS = (10, 20, 30, 40, 50)
DEFAULT_RI_SIZES = (4, 8, 16, 32, 64)


class AllocationError(ValueError):
    pass


@dataclass
class AllocationInputs:
    gamma: float
    alpha_pf: float | Mapping[int, float]
    alpha_pfplus: Mapping
    alpha_ri: Mapping[int, float]
    budget_bt: float
    models: QualityModelSet
    lapse_dist: Mapping[int, float] = field(default_factory=lambda: {1: 1.0})
    lapse_dist_pfplus: Mapping[int, float] | None = None
    borders: Sequence[int] = DEFAULT_BORDERS
    ri_sizes: Sequence[int] = DEFAULT_RI_SIZES
    kappa_min: Mapping[int, float] | None = None
    a_pf: float = 8100.0
    h_extent: float = 90.0
    v_extent: float = 90.0
    total_tiles: int = 512

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma={self.gamma} outside [0, 1]")
        apf = self.alpha_pf.values() if isinstance(self.alpha_pf, Mapping) else [self.alpha_pf]
        alphas = [*apf, *self.alpha_pfplus.values(), *self.alpha_ri.values()]
        if any(not 0.0 <= a <= 1.0 for a in alphas):
            raise ValueError("hit rates must lie in [0, 1]")
        if not self.budget_bt > 0:
            raise ValueError(f"budget must be positive, got {self.budget_bt}")
        if not self.borders or not self.ri_sizes:
            raise ValueError("empty candidate set")

    def kmin(self, k: int) -> float:
        if self.kappa_min is not None and k in self.kappa_min:
            return self.kappa_min[k]
        return kappa(self.models.kappa, math.ceil(self.total_tiles / k))

    def lam(self, k: int) -> float:
        return 1.0 - k / self.total_tiles

    def a_pfplus(self, border) -> float:
        return nominal_border_area(border, self.h_extent, self.v_extent)

    def a_ri(self, k: int) -> float:
        return k * SPHERE_DEG2 / self.total_tiles

    def alphas(self, border, k):
        """(alpha_pf, alpha_pf+, alpha_ri); RI is trimmed so the three never sum past 1.

        ``alpha_pf`` may be keyed by RI size and ``alpha_pfplus`` by
        ``(border, k)`` when the hit rates were measured with the RI block
        carved out; plain scalars / border keys are used otherwise.
        """
        apf = self.alpha_pf[k] if isinstance(self.alpha_pf, Mapping) else self.alpha_pf
        pp = self.alpha_pfplus
        app = min(pp[border, k] if (border, k) in pp else pp[border], 1.0 - apf)
        ari = min(self.alpha_ri[k], 1.0 - apf - app)
        return apf, app, max(ari, 0.0)

    def rate_factors(self):
        f_pf = lapse_factor(self.lapse_dist, self.models.rho)
        f_pp = f_pf if self.lapse_dist_pfplus is None else lapse_factor(self.lapse_dist_pfplus, self.models.rho)
        return f_pf, f_pp


@dataclass(frozen=True)
class SegmentPlan:
    border_deg: int
    ri_tile_count: int
    r_e: float
    r_b: float
    expected_quality: float
    budget_bt: float
    pf_rate_factor: float = 1.0
    pfplus_rate_factor: float = 1.0
    clamped: bool = False

    def spent(self, inputs: AllocationInputs) -> float:
        k = self.ri_tile_count
        lam = inputs.lam(k)
        return lam * inputs.a_pf * self.r_e + (lam * inputs.a_pfplus(self.border_deg) + inputs.a_ri(k)) * self.r_b


def expected_quality(re, rb, inputs: AllocationInputs, border_deg, ri_count, factors=None) -> float:
    m = inputs.models
    f_pf, f_pp = factors or inputs.rate_factors()
    q_pf = m.pf.shifted(f_pf).quality(re)
    q_pp = m.pfplus_for(border_deg).shifted(f_pp).quality(rb)
    q_ri = m.ri.quality(rb)
    apf, app, ari = inputs.alphas(border_deg, ri_count)
    g = inputs.gamma
    hit = g * (apf * q_pf + app * q_pp + ari * q_ri)
    return hit + (1.0 - g * (apf + app + ari)) * inputs.kmin(ri_count) * q_ri


def _xy(inputs: AllocationInputs, border_deg, k):
    m = inputs.models
    apf, app, ari = inputs.alphas(border_deg, k)
    g = inputs.gamma
    kmin = inputs.kmin(k)
    x = g * apf * m.pf.b
    y = g * app * m.pfplus_for(border_deg).b + g * ari * m.ri.b + (1.0 - g * (apf + app + ari)) * kmin * m.ri.b
    return x, y


def closed_form_rates(inputs: AllocationInputs, border_deg, ri_count):
    """(r_e, r_b, clamped) maximising expected quality on the budget line."""
    x, y = _xy(inputs, border_deg, ri_count)
    if not x + y > 0:
        raise AllocationError(f"degenerate weights X={x}, Y={y} for border {border_deg}, RI {ri_count}")
    B = inputs.budget_bt
    lam = inputs.lam(ri_count)
    c_e = lam * inputs.a_pf
    c_b = lam * inputs.a_pfplus(border_deg) + inputs.a_ri(ri_count)
    re = x / (x + y) * B / c_e
    rb = y / (x + y) * B / c_b
    clamped = False
    if rb < RATE_FLOOR:
        rb = RATE_FLOOR
        re = (B - c_b * rb) / c_e
        clamped = True
    if re < rb:
        re = rb = B / (c_e + c_b)
        clamped = True
    if rb < RATE_FLOOR:
        # budget too small for anything: spend the floor and overshoot
        re = rb = RATE_FLOOR
        clamped = True
    return re, rb, clamped


def plan_segment(inputs: AllocationInputs) -> SegmentPlan:
    inputs.models.check_borders(inputs.borders)
    f_pf, f_pp = inputs.rate_factors()
    best = None
    for b in sorted(inputs.borders):
        for k in sorted(inputs.ri_sizes):
            try:
                re, rb, cl = closed_form_rates(inputs, b, k)
            except AllocationError:
                continue
            q = expected_quality(re, rb, inputs, b, k, (f_pf, f_pp))
            # strict > keeps the smallest border, then smallest RI, on ties
            if best is None or q > best.expected_quality:
                best = SegmentPlan(int(b), int(k), re, rb, q, inputs.budget_bt, f_pf, f_pp, cl)
    if best is None:
        raise AllocationError("every (border, RI) candidate is degenerate")
    return best


# --- budget control ---------------------------------------------------------

@dataclass
class BudgetState:
    segment_budget: float
    bits_spent: float = 0.0
    frame_index: int = 0
    frames_per_segment: int = 30
    occupancy: int = 0
    capacity: int = 10

    def __post_init__(self):
        if self.bits_spent < 0:
            raise ValueError("bits_spent must be >= 0")
        if not 0 <= self.occupancy <= self.capacity:
            raise ValueError(f"occupancy {self.occupancy} outside [0, {self.capacity}]")
        if not 0 <= self.frame_index < self.frames_per_segment:
            raise ValueError(f"frame index {self.frame_index} outside [0, {self.frames_per_segment})")


def segment_budget(predicted_bits: float, sender_backlog: float, eta: float = 0.66) -> float:
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    return max(eta * (predicted_bits - sender_backlog), 0.0)


def remaining_segment_budget(state: BudgetState) -> float:
    b = state.segment_budget
    pace = state.frame_index / state.frames_per_segment * b
    return max(b - max(state.bits_spent, pace), 0.0)


def frame_bit_budget(state: BudgetState, a_param: float = 1.20, b_param: float = 1.00):
    """Bits for frame n, or None when the sender buffer is full (frame skipped)."""
    return frame_budget(state.segment_budget, state.bits_spent, state.frame_index, state.frames_per_segment,
                        state.occupancy, state.capacity, a_param, b_param)


def frame_budget(seg_budget, spent, j, n_frames, occupancy, capacity, a_param=1.20, b_param=1.00):
    # unvalidated form of frame_bit_budget for the simulator loop
    if occupancy >= capacity:
        return None
    left = max(seg_budget - max(spent, j / n_frames * seg_budget), 0.0)
    return left / (n_frames - j) * a_param * math.exp(-b_param * occupancy / capacity)


# --- lapse statistics -------------------------------------------------------

def lapse_distribution_from_samples(taus: Iterable) -> dict:
    counts = Counter()
    for t in taus:
        counts.update(np.atleast_1d(np.asarray(t, dtype=np.int64)).tolist())
    n = sum(counts.values())
    if n == 0:
        return {1: 1.0}
    return {int(t): c / n for t, c in sorted(counts.items())}


def lapse_distribution_from_counts(counts) -> dict:
    """Same as ``lapse_distribution_from_samples`` but from a tau-indexed count array."""
    c = np.asarray(counts)
    n = int(c.sum())
    if n == 0:
        return {1: 1.0}
    nz = np.flatnonzero(c)
    return {int(t): int(c[t]) / n for t in nz}


def measure_lapse_distribution(last_coded: np.ndarray, frames: Sequence) -> dict:
    """Replay a segment against a last-coded-frame table.

    ``frames`` holds ``(frame_index, pf_tiles, coded_tiles)`` per coded frame;
    the lapse of each PF tile is taken at its coding instant, then every
    coded tile is stamped with the frame index.
    """
    last = np.array(last_coded, dtype=np.int64, copy=True)
    samples = []
    for n, pf, coded in frames:
        pf = np.asarray(pf, dtype=np.int64)
        samples.append(n - last[pf])
        last[np.asarray(coded, dtype=np.int64)] = n
    return lapse_distribution_from_samples(samples)
