import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fovstream import quality as qm
from fovstream.quality import (
    FitError,
    LogQrModel,
    QualityDecayModel,
    RateIncreaseModel,
    Telemetry,
    adjusted_rate,
    decayed_quality,
    fit_kappa_model,
    fit_log_model,
    fit_rho_model,
    kappa,
    quality_at_rate,
    rate_at_quality,
    rho,
    weighted_average_qr,
    ws_psnr,
)

pos = st.floats(0.01, 5.0)


# --- WS-PSNR ----------------------------------------------------------------------

def test_ws_psnr_examples():
    assert ws_psnr(255**2, 255) == 0.0
    assert ws_psnr(0.0) == 100.0
    assert ws_psnr(65.025, 255) == pytest.approx(30.0, abs=1e-12)
    with pytest.raises(ValueError):
        ws_psnr(-1.0)


def test_ws_mse_weights_rows():
    from fovstream.geometry import ws_mse
    ref = np.zeros((8, 16))
    dist = np.zeros((8, 16))
    dist[0] = 10.0  # an error near the pole counts less than at the equator
    pole = ws_mse(ref, dist)
    dist = np.zeros((8, 16))
    dist[4] = 10.0
    assert ws_mse(ref, dist) > pole > 0


# --- Q-R ----------------------------------------------------------------------------

def test_quality_at_rate_examples():
    m = LogQrModel(30.0, 3.0)
    assert quality_at_rate(m, 1.0) == 30.0
    assert quality_at_rate(m, math.e**2) == pytest.approx(36.0, abs=1e-12)
    assert rate_at_quality(m, 30.0) == 1.0
    assert rate_at_quality(m, 36.0) == pytest.approx(math.e**2, rel=1e-12)


def test_rate_floor_clamps_and_counts():
    m = LogQrModel(30.0, 3.0)
    t = Telemetry()
    assert quality_at_rate(m, 0.0, t) == quality_at_rate(m, qm.RATE_FLOOR)
    quality_at_rate(m, np.array([0.0, 1.0, 1e-9]), t)
    assert t["rate_clamped"] == 3


def test_slope_must_be_positive():
    with pytest.raises(ValueError):
        LogQrModel(30.0, 0.0)


@settings(max_examples=200)
@given(st.floats(0.01, 1e4), st.floats(-10, 50), st.floats(0.1, 10))
def test_quality_rate_inverse(r, a, b):
    m = LogQrModel(a, b)
    assert rate_at_quality(m, quality_at_rate(m, r)) == pytest.approx(r, rel=1e-9)


def test_shifted_curve():
    m = LogQrModel(30.0, 3.0)
    s = m.shifted(2.0)
    # the shifted curve needs twice the bits for the same quality
    assert s.quality(2.0 * 5.0) == pytest.approx(m.quality(5.0))


# --- rho / kappa ----------------------------------------------------------------------

def test_rho_examples():
    m = RateIncreaseModel(1.0, 0.5)
    assert rho(m, 1) == 1.0
    assert rho(m, 200) == pytest.approx(2.0, abs=1e-6)
    assert rho(m, 3) == pytest.approx(1 + (1 - math.exp(-1)), abs=1e-12)
    assert rho(m, 10) == pytest.approx(1 + (1 - math.exp(-4.5)))
    with pytest.raises(ValueError):
        rho(m, 0)
    with pytest.raises(ValueError):
        rho(m, np.array([1.0, 0.5]))


@settings(max_examples=100)
@given(st.floats(0, 3), pos, st.integers(1, 1000))
def test_rho_bounds_monotone(c, d, tau):
    m = RateIncreaseModel(c, d)
    r0, r1 = rho(m, tau), rho(m, tau + 1)
    assert 1.0 <= r0 <= r1 <= 1.0 + c + 1e-12


def test_kappa_examples():
    m = QualityDecayModel(0.01, 1.0)
    assert kappa(m, 0) == 1.0
    assert kappa(m, 100) == pytest.approx(math.exp(-1), abs=1e-12)
    with pytest.raises(ValueError):
        kappa(m, -1)


@settings(max_examples=50)
@given(st.floats(1e-3, 0.2), st.floats(0.2, 2.0))
def test_kappa_strictly_decreasing(g, h):
    m = QualityDecayModel(g, h)
    k = kappa(m, np.arange(0, 1001))
    assert k[0] == 1.0
    d = np.diff(k)
    # strictly decreasing until it underflows to 0
    assert np.all(d[k[1:] > 0] < 0) and np.all(k >= 0)


def test_adjusted_rate_examples():
    m = RateIncreaseModel(1.0, 0.5)
    assert adjusted_rate(10.0, {1: 1.0}, m) == 10.0
    assert adjusted_rate(1.0, {1: 0.5, 3: 0.5}, m) == pytest.approx((1 + 1 + (1 - math.exp(-1))) / 2, abs=1e-12)
    assert adjusted_rate(1.0, {1: 0.5, 3: 0.5}, m) == pytest.approx(1.3161, abs=1e-4)
    with pytest.raises(ValueError):
        adjusted_rate(1.0, {1: 0.5, 3: 0.4}, m)
    with pytest.raises(ValueError):
        adjusted_rate(1.0, {}, m)


@settings(max_examples=100)
@given(st.dictionaries(st.integers(1, 300), st.floats(0.01, 1.0), min_size=1, max_size=8), st.floats(0.01, 100))
def test_adjusted_rate_never_below_ideal(raw, ideal):
    tot = sum(raw.values())
    dist = {k: v / tot for k, v in raw.items()}
    if abs(sum(dist.values()) - 1) > 1e-9:
        return
    assert adjusted_rate(ideal, dist, RateIncreaseModel(1.0, 0.3)) >= ideal * (1 - 1e-12)


def test_decayed_quality():
    m = QualityDecayModel(0.01, 0.8)
    assert decayed_quality(40.0, 0, m) == 40.0
    seq = [decayed_quality(40.0, t, m) for t in range(0, 30)]
    assert all(b < a for a, b in zip(seq, seq[1:]))
    # worst case after a full RI sweep: kappa_min * Q_RI(R_b)
    ri = LogQrModel(13.0, 4.0)
    tau_max = math.ceil(512 / 4)
    assert decayed_quality(ri.quality(20.0), tau_max, m) == pytest.approx(kappa(m, tau_max) * ri.quality(20.0))


# --- fitting ------------------------------------------------------------------------

def test_fit_log_two_points_exact():
    m = fit_log_model([(1.0, 30.0), (math.e, 33.0)])
    assert m.a == pytest.approx(30.0, abs=1e-9) and m.b == pytest.approx(3.0, abs=1e-9)


def test_fit_log_four_points_roundtrip():
    r = np.array([45.0, 130.0, 400.0, 1200.0])
    m = fit_log_model(np.column_stack([r, 40 + 2.5 * np.log(r)]))
    assert m.a == pytest.approx(40.0, abs=1e-9) and m.b == pytest.approx(2.5, abs=1e-9)


def test_fit_log_noise():
    rng = np.random.default_rng(0)
    r = np.array([45.0, 130.0, 400.0, 1200.0])
    bs = []
    for _ in range(50):
        m = fit_log_model(np.column_stack([r, 40 + 2.5 * np.log(r) + rng.normal(0, 0.1, 4)]))
        bs.append(m.b)
    assert np.all(np.abs(np.array(bs) - 2.5) / 2.5 < 0.05)


def test_fit_log_errors():
    with pytest.raises(FitError):
        fit_log_model([(1.0, 30.0)])
    with pytest.raises(FitError):
        fit_log_model([(1.0, 30.0), (1.0, 31.0)])
    with pytest.raises(FitError):
        fit_log_model([(0.0, 30.0), (1.0, 31.0)])
    with pytest.raises(FitError):
        fit_log_model([(1.0, 30.0), (2.0, 30.0), (4.0, 30.0)])


def test_fit_rho_noiseless():
    tau = np.arange(1, 31, dtype=float)
    m = fit_rho_model(np.column_stack([tau, rho(RateIncreaseModel(0.8, 0.3), tau)]))
    assert m.c == pytest.approx(0.8, abs=1e-6) and m.d == pytest.approx(0.3, abs=1e-6)


def test_fit_rho_errors():
    with pytest.raises(FitError):
        fit_rho_model([(1, 1.0), (2, 1.2)])
    with pytest.raises(FitError):
        fit_rho_model([(5, 1.5), (5, 1.5), (5, 1.5)])


def test_fit_kappa_noisy():
    rng = np.random.default_rng(7)
    tau = np.arange(0, 121, 4, dtype=float)
    k = np.clip(kappa(QualityDecayModel(0.02, 0.9), tau) + rng.normal(0, 0.005, len(tau)), 1e-3, 1.0)
    m = fit_kappa_model(np.column_stack([tau, k]))
    assert abs(m.g - 0.02) / 0.02 < 0.10 and abs(m.h - 0.9) / 0.9 < 0.10


def test_fit_kappa_noiseless():
    tau = np.arange(0, 60, dtype=float)
    m = fit_kappa_model(np.column_stack([tau, kappa(QualityDecayModel(0.05, 0.7), tau)]))
    assert m.g == pytest.approx(0.05, rel=1e-6) and m.h == pytest.approx(0.7, rel=1e-6)


def test_fit_kappa_single_tau():
    with pytest.raises(FitError):
        fit_kappa_model([(5, 0.9), (5, 0.9), (5, 0.9)])


# --- orientation averaging -------------------------------------------------------------

def test_weighted_average_identical():
    m = LogQrModel(30.0, 3.0)
    avg = weighted_average_qr([m] * 6)
    assert avg.a == pytest.approx(30.0) and avg.b == pytest.approx(3.0)


def test_weighted_average_default_weights():
    assert qm.ORIENTATION_WEIGHTS == (0.2, 0.2, 0.2, 0.2, 0.1, 0.1)
    ms = [LogQrModel(30.0 + i, 3.0 + 0.1 * i) for i in range(6)]
    avg = weighted_average_qr(ms)
    w = np.array(qm.ORIENTATION_WEIGHTS)
    assert avg.a == pytest.approx(w @ [m.a for m in ms]) and avg.b == pytest.approx(w @ [m.b for m in ms])


def test_weighted_average_one_hot():
    a, b = LogQrModel(30.0, 3.0), LogQrModel(20.0, 5.0)
    avg = weighted_average_qr([a, b], (1.0, 0.0))
    assert avg.a == pytest.approx(30.0) and avg.b == pytest.approx(3.0)


def test_weighted_average_bad_weights():
    with pytest.raises(ValueError):
        weighted_average_qr([LogQrModel(30.0, 3.0)] * 6, (0.2,) * 6)


# --- presets / IO -----------------------------------------------------------------------

def test_presets_cover_border_candidates():
    sets = qm.load_presets()
    assert {"stable-scene", "dynamic-scene"} <= set(sets)
    for s in sets.values():
        s.check_borders([10, 20, 30, 40, 50])
        # intra curve sits below inter
        assert s.ri.quality(100.0) < s.pf.quality(100.0)


def test_preset_roundtrip(models):
    again = qm.QualityModelSet.from_dict(models.to_dict(), models.name)
    assert again == models
    with pytest.raises(KeyError):
        models.pfplus_for(15)
    with pytest.raises(KeyError):
        qm.preset("nope")


def test_read_points_csv(tmp_path):
    p = tmp_path / "pts.csv"
    p.write_text("rate,quality\n1,30\n2.718281828459045,33\n")
    pts = qm.read_points_csv(p)
    assert pts.shape == (2, 2)
    p.write_text("rate,quality\n1,30\nx,y\n")
    with pytest.raises(FitError):
        qm.read_points_csv(p)
