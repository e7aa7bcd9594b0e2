"""Quality-rate models: log Q-R curves per region, rate inflation rho(tau),
quality decay kappa(tau), and least-squares fitters.

Rates are in bits per square degree per frame.  All logs are natural.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
import yaml
from scipy.optimize import least_squares

log = logging.getLogger(__name__)

RATE_FLOOR = 1e-4
PSNR_CAP = 100.0

# one rate per QP in {27, 32, 37, 42}; only used when re-fitting averaged curves
QP_SAMPLE_RATES = (1200.0, 400.0, 130.0, 45.0)
ORIENTATION_WEIGHTS = (0.2, 0.2, 0.2, 0.2, 0.1, 0.1)  # front left right back top bottom


class FitError(ValueError):
    pass


class Telemetry(dict):
    """Loose counter bag; callers pass one in to see clamping events."""

    def bump(self, key, n=1):
        self[key] = self.get(key, 0) + n


@dataclass(frozen=True)
class LogQrModel:
    a: float
    b: float
    region_kind: str = "PF"

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"Q-R slope must be positive, got b={self.b}")

    def quality(self, rate, telemetry: Telemetry | None = None):
        return quality_at_rate(self, rate, telemetry)

    def rate(self, q):
        return rate_at_quality(self, q)

    def shifted(self, factor: float) -> "LogQrModel":
        """Curve Q(R / factor): the quality when ``factor`` times the ideal bits are spent."""
        return LogQrModel(self.a - self.b * math.log(factor), self.b, self.region_kind)


@dataclass(frozen=True)
class RateIncreaseModel:
    c: float = 1.0
    d: float = 0.3

    def __post_init__(self):
        if self.c < 0 or not self.d > 0:
            raise ValueError(f"need c >= 0 and d > 0, got c={self.c}, d={self.d}")

    def __call__(self, tau):
        return rho(self, tau)


@dataclass(frozen=True)
class QualityDecayModel:
    g: float = 0.01
    h: float = 0.8

    def __post_init__(self):
        if not (self.g > 0 and self.h > 0):
            raise ValueError(f"need g, h > 0, got g={self.g}, h={self.h}")

    def __call__(self, tau):
        return kappa(self, tau)


@dataclass(frozen=True)
class QualityModelSet:
    pf: LogQrModel
    pfplus: Mapping[int, LogQrModel]
    ri: LogQrModel
    rho: RateIncreaseModel = RateIncreaseModel()
    kappa: QualityDecayModel = QualityDecayModel()
    peak_intensity: int = 255
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def pfplus_for(self, border_deg) -> LogQrModel:
        key = int(round(border_deg))
        try:
            return self.pfplus[key]
        except KeyError:
            raise KeyError(f"no PF+ model for a {key} degree border (have {sorted(self.pfplus)})") from None

    def check_borders(self, borders):
        missing = [b for b in borders if int(round(b)) not in self.pfplus]
        if missing:
            raise ValueError(f"model set '{self.name}' lacks PF+ curves for borders {missing}")

    @classmethod
    def from_dict(cls, d: dict, name: str = "") -> "QualityModelSet":
        return cls(
            pf=LogQrModel(float(d["pf"]["a"]), float(d["pf"]["b"]), "PF"),
            pfplus={
                int(k): LogQrModel(float(v["a"]), float(v["b"]), f"PF+{int(k)}")
                for k, v in d["pfplus"].items()
            },
            ri=LogQrModel(float(d["ri"]["a"]), float(d["ri"]["b"]), "RI"),
            rho=RateIncreaseModel(**{k: float(v) for k, v in d.get("rho", {}).items()}),
            kappa=QualityDecayModel(**{k: float(v) for k, v in d.get("kappa", {}).items()}),
            peak_intensity=int(d.get("peak_intensity", 255)),
            name=name or d.get("name", ""),
        )

    def to_dict(self) -> dict:
        return {
            "peak_intensity": self.peak_intensity,
            "pf": {"a": self.pf.a, "b": self.pf.b},
            "pfplus": {k: {"a": m.a, "b": m.b} for k, m in sorted(self.pfplus.items())},
            "ri": {"a": self.ri.a, "b": self.ri.b},
            "rho": {"c": self.rho.c, "d": self.rho.d},
            "kappa": {"g": self.kappa.g, "h": self.kappa.h},
        }


def load_presets(path=None) -> dict:
    if path is None:
        text = resources.files("fovstream").joinpath("presets.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = yaml.safe_load(text) or {}
    return {name: QualityModelSet.from_dict(d, name) for name, d in raw.get("quality", {}).items()}


def preset(name: str) -> QualityModelSet:
    sets = load_presets()
    if name not in sets:
        raise KeyError(f"unknown quality preset '{name}' (have {sorted(sets)})")
    return sets[name]


# --- formulas ---------------------------------------------------------------

def ws_psnr(ws_mse: float, peak_intensity: int = 255, cap: float = PSNR_CAP) -> float:
    if ws_mse < 0:
        raise ValueError("ws_mse must be >= 0")
    if ws_mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(peak_intensity**2 / ws_mse))


def quality_at_rate(model: LogQrModel, rate, telemetry: Telemetry | None = None):
    if isinstance(rate, (float, int)):
        if rate < RATE_FLOOR:
            if telemetry is not None:
                telemetry.bump("rate_clamped")
            rate = RATE_FLOOR
        return model.a + model.b * math.log(rate)
    r = np.asarray(rate, dtype=float)
    low = r < RATE_FLOOR
    if np.any(low):
        if telemetry is not None:
            telemetry.bump("rate_clamped", int(np.count_nonzero(low)))
        r = np.maximum(r, RATE_FLOOR)
    q = model.a + model.b * np.log(r)
    return float(q) if q.ndim == 0 else q


def rate_at_quality(model: LogQrModel, q):
    r = np.exp((np.asarray(q, dtype=float) - model.a) / model.b)
    return float(r) if r.ndim == 0 else r


def rho(model: RateIncreaseModel, tau):
    if isinstance(tau, (float, int)):
        if tau < 1:
            raise ValueError("tau must be >= 1 when a tile is coded")
        return 1.0 + model.c * (1.0 - math.exp(-model.d * (tau - 1.0)))
    t = np.asarray(tau, dtype=float)
    if t.size and t.min() < 1:
        raise ValueError("tau must be >= 1 when a tile is coded")
    out = 1.0 + model.c * (1.0 - np.exp(-model.d * (t - 1.0)))
    return float(out) if out.ndim == 0 else out


def kappa(model: QualityDecayModel, tau):
    if isinstance(tau, (float, int)):
        if tau < 0:
            raise ValueError("tau must be >= 0")
        return math.exp(-model.g * tau**model.h)
    t = np.asarray(tau, dtype=float)
    if t.size and t.min() < 0:
        raise ValueError("tau must be >= 0")
    out = np.exp(-model.g * t**model.h)
    return float(out) if out.ndim == 0 else out


def _check_dist(lapse_dist: Mapping[int, float]):
    if not lapse_dist:
        raise ValueError("empty lapse distribution")
    p = np.fromiter(lapse_dist.values(), dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"lapse probabilities must be >= 0 and sum to 1 (sum={p.sum()!r})")


def lapse_factor(lapse_dist: Mapping[int, float], rho_model: RateIncreaseModel) -> float:
    """Expected rate inflation sum_tau p(tau) rho(tau)."""
    _check_dist(lapse_dist)
    taus = np.fromiter(lapse_dist.keys(), dtype=float)
    p = np.fromiter(lapse_dist.values(), dtype=float)
    return float(np.dot(p, rho(rho_model, taus)))


def adjusted_rate(ideal_rate, lapse_dist: Mapping[int, float], rho_model: RateIncreaseModel):
    return lapse_factor(lapse_dist, rho_model) * ideal_rate


def adjusted_model(model: LogQrModel, lapse_dist, rho_model) -> LogQrModel:
    """Q-R curve after lapse inflation: same quality now costs F times more bits."""
    return model.shifted(lapse_factor(lapse_dist, rho_model))


def decayed_quality(last_quality, tau, model: QualityDecayModel):
    return kappa(model, tau) * last_quality


# --- fitting ----------------------------------------------------------------

def fit_log_model(points: Sequence, region_kind: str = "PF") -> LogQrModel:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise FitError("need at least 2 (rate, quality) points")
    r, q = pts[:, 0], pts[:, 1]
    if np.any(r <= 0):
        raise FitError("rates must be positive")
    if len(np.unique(r)) != len(r):
        raise FitError("duplicate rates")
    X = np.column_stack([np.ones_like(r), np.log(r)])
    (a, b), *_ = np.linalg.lstsq(X, q, rcond=None)
    if not b > 1e-12:
        log.warning("log Q-R fit gave non-positive slope b=%.3g", b)
        raise FitError(f"fitted slope b={b:.3g} is not positive")
    return LogQrModel(float(a), float(b), region_kind)


_TIGHT = dict(xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)


def _finish(res, what):
    if not res.success and res.status <= 0:
        rms = float(np.sqrt(np.mean(res.fun**2)))
        raise FitError(f"{what} fit did not converge ({res.message}); rms residual {rms:.3g}")
    return res.x


def fit_rho_model(points: Sequence) -> RateIncreaseModel:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        raise FitError("need at least 3 (tau, ratio) points")
    tau, ratio = pts[:, 0], pts[:, 1]
    if np.any(tau < 1) or np.any(ratio < 1):
        raise FitError("rho points need tau >= 1 and ratio >= 1")
    if len(np.unique(tau[tau > 1])) < 2:
        raise FitError("rho fit is underdetermined: need 2 distinct tau > 1")
    y = ratio - 1.0
    # c is linear for fixed d; seed d on a log grid
    best = None
    for d in np.geomspace(1e-3, 10.0, 60):
        z = 1.0 - np.exp(-d * (tau - 1.0))
        c = max(float(z @ y / (z @ z)), 0.0) if z @ z > 0 else 0.0
        sse = float(np.sum((c * z - y) ** 2))
        if best is None or sse < best[0]:
            best = (sse, c, d)
    _, c0, d0 = best

    def resid(p):
        return p[0] * (1.0 - np.exp(-p[1] * (tau - 1.0))) - y

    x = _finish(least_squares(resid, [c0, d0], bounds=([0.0, 1e-9], [np.inf, np.inf]), **_TIGHT), "rho")
    return RateIncreaseModel(float(x[0]), float(x[1]))


def fit_kappa_model(points: Sequence) -> QualityDecayModel:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        raise FitError("need at least 3 (tau, ratio) points")
    tau, k = pts[:, 0], pts[:, 1]
    if np.any(tau < 0) or np.any(k <= 0) or np.any(k > 1):
        raise FitError("kappa points need tau >= 0 and ratio in (0, 1]")
    use = (tau > 0) & (k < 1)
    if len(np.unique(tau[use])) < 2:
        raise FitError("kappa fit is underdetermined: need 2 distinct tau > 0 with decay")
    # ln(-ln k) = ln g + h ln tau gives the seed
    h0, lg0 = np.polyfit(np.log(tau[use]), np.log(-np.log(k[use])), 1)
    seeds = [(math.exp(lg0), h0)] + [(g, h) for g in (1e-3, 1e-2, 1e-1) for h in (0.5, 1.0, 1.5)]

    def resid(p):
        return np.exp(-p[0] * tau ** p[1]) - k

    best = min(seeds, key=lambda s: float(np.sum(resid(np.maximum(s, 1e-9)) ** 2)))
    x0 = np.maximum(best, 1e-6)
    x = _finish(least_squares(resid, x0, bounds=([1e-12, 1e-6], [np.inf, 20.0]), **_TIGHT), "kappa")
    return QualityDecayModel(float(x[0]), float(x[1]))


def weighted_average_qr(models: Sequence[LogQrModel], probabilities=ORIENTATION_WEIGHTS,
                        rates=QP_SAMPLE_RATES) -> LogQrModel:
    """Orientation-weighted Q-R curve, refit through the QP sample rates."""
    w = np.asarray(probabilities, dtype=float)
    if len(w) != len(models):
        raise ValueError(f"{len(models)} models but {len(w)} weights")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"orientation weights must sum to 1 (sum={w.sum()!r})")
    r = np.asarray(rates, dtype=float)
    q = sum(wi * quality_at_rate(m, r) for wi, m in zip(w, models))
    return fit_log_model(np.column_stack([r, q]), models[0].region_kind)


def read_points_csv(path) -> np.ndarray:
    """Two numeric columns, optional header line."""
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except (ValueError, IndexError):
                if rows or ln > 1:
                    raise FitError(f"{path}:{ln}: expected two numeric columns") from None
    if not rows:
        raise FitError(f"{path}: no data rows")
    return np.array(rows)
