import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fovstream import predictors as pr
from fovstream.config import SimConfig
from fovstream.geometry import FovPose, angles_to_vector
from fovstream.predictors import (
    HoldLastFov,
    OracleFov,
    ReplayError,
    TruncatedLinearFov,
    harmonic_mean_bandwidth,
    rls_bandwidth,
    score_bandwidth,
    score_fov,
)
from fovstream.sim import run_simulation
from fovstream.traces import kalman_smooth, synthetic_bandwidth_trace, synthetic_fov_trace

from conftest import mc_frustum


def great_circle(start_yaw, start_pitch, axis_deg, step_deg, n):
    """n points moving step_deg per sample along a great circle."""
    p0 = angles_to_vector(start_yaw, start_pitch)
    a = np.radians(axis_deg)
    # any unit vector orthogonal to p0 gives the direction of travel
    helper = np.array([0.0, 0.0, 1.0]) if abs(p0[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(p0, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(p0, e1)
    t = math.cos(a) * e1 + math.sin(a) * e2
    th = np.radians(step_deg) * np.arange(n)
    return np.cos(th)[:, None] * p0 + np.sin(th)[:, None] * t


def ang_deg(a, b):
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=-1), -1, 1)))


# --- FoV --------------------------------------------------------------------------------

def test_constant_history():
    h = np.tile(angles_to_vector(30, 10), (30, 1))
    out = TruncatedLinearFov().predict(h, 10)
    assert np.allclose(out, h[0], atol=1e-12)


def test_single_sample_fallback():
    v = angles_to_vector(-50, 20)
    out = TruncatedLinearFov().predict(v[None], 4)
    assert out.shape == (4, 3) and np.allclose(out, v)
    poses = pr.truncated_linear_fov([FovPose.from_vector(v)], 3)
    assert all(np.allclose(p.vector, v) for p in poses)


@pytest.mark.parametrize("step", [0.25, 1.0, 2.0])
@pytest.mark.parametrize("axis", [0.0, 45.0, 90.0])
def test_great_circle_extrapolation(step, axis):
    path = great_circle(20.0, 10.0, axis, step, 35)
    pred = TruncatedLinearFov().predict(path[:30], 5)
    assert ang_deg(pred[4], path[34]) < 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 40), st.integers(1, 30))
def test_predictions_unit_norm(seed, n, h):
    rng = np.random.default_rng(seed)
    hist = rng.normal(size=(n, 3))
    hist /= np.linalg.norm(hist, axis=1)[:, None]
    out = TruncatedLinearFov().predict(hist, h)
    assert out.shape == (h, 3)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_hold_and_oracle():
    xyz = synthetic_fov_trace(2000, 1).xyz
    assert np.allclose(HoldLastFov().predict(xyz[:10], 3), xyz[9])
    assert np.allclose(OracleFov(xyz).predict(xyz[:10], 3, 9), xyz[10:13])


# --- bandwidth ---------------------------------------------------------------------------

def test_rls_constant_and_zero():
    assert rls_bandwidth([7e5] * 15) == pytest.approx(5 * 7e5, rel=1e-12)
    assert rls_bandwidth([]) == 0.0
    assert rls_bandwidth([0.0] * 15) == 0.0


def test_rls_ramp():
    y = 1000.0 + 100.0 * np.arange(15)
    want = sum(1000.0 + 100.0 * k for k in range(15, 20))
    assert rls_bandwidth(y) == pytest.approx(want, rel=0.05)


def test_rls_nonnegative():
    # steep decline extrapolates below zero and is floored
    assert rls_bandwidth(np.linspace(1e6, 1e3, 15)) >= 0.0


def test_harmonic_examples():
    assert harmonic_mean_bandwidth([3e5] * 15) == pytest.approx(5 * 3e5)
    assert harmonic_mean_bandwidth([1.0, 4.0]) == pytest.approx(5 * 1.6)
    assert harmonic_mean_bandwidth([0.0, 1.0]) >= 0.0


@settings(max_examples=100)
@given(st.lists(st.floats(1e-3, 1e9), min_size=1, max_size=15))
def test_harmonic_below_arithmetic(xs):
    assert harmonic_mean_bandwidth(xs) <= 5 * np.mean(xs) * (1 + 1e-9)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1e9), min_size=0, max_size=20))
def test_bandwidth_predictions_nonnegative(xs):
    assert rls_bandwidth(xs) >= 0.0 and harmonic_mean_bandwidth(xs) >= 0.0


# --- scores ------------------------------------------------------------------------------

def test_score_bandwidth_examples():
    a = np.array([1e6, 2e6, 5e5])
    s = score_bandwidth(a, a)
    assert s.mape == 0.0 and s.nmae == 0.0
    s = score_bandwidth(2 * a, a)
    assert s.mape == 1.0 and s.nmae == 1.0
    s = score_bandwidth(10 * a, a)
    assert s.mape == 1.0  # capped
    with pytest.raises(ValueError):
        score_bandwidth(a[:2], a)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 1e9), st.floats(1, 1e9)), min_size=1, max_size=30))
def test_mape_in_unit_interval(pairs):
    p, a = map(np.array, zip(*pairs))
    s = score_bandwidth(p, a)
    assert 0.0 <= s.mape <= 1.0 and s.nmae >= 0.0


def test_score_fov_identity():
    poses = [FovPose.from_angles(y, 0) for y in (0, 40, 170)]
    assert score_fov(poses, poses) == pytest.approx(1.0)


def test_score_fov_yaw_offset_monte_carlo():
    pred = [FovPose.from_angles(0.0, 0.0)]
    act = [FovPose.from_angles(90.0, 0.0)]
    d = mc_frustum(90.0, 0.0, 90, 90, 1_000_000, seed=5)
    cf = d[:, 0]
    mc = np.mean((cf > 0) & (np.abs(d[:, 1]) <= cf) & (np.abs(d[:, 2]) <= cf))
    assert score_fov(pred, act, samples_per_axis=256) == pytest.approx(mc, abs=0.005)


def test_hit_rate_nonincreasing_in_horizon():
    for seed in range(3):
        xyz = kalman_smooth(synthetic_fov_trace(30000, seed, turn_rate=0.2)).xyz
        hr = pr.fov_hit_rate_by_horizon(TruncatedLinearFov(), xyz, (1, 3, 5, 10, 15, 30), stride=5)
        vals = list(hr.values())
        assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:])), hr


# --- replay ------------------------------------------------------------------------------

def test_replay_echo_truth(tmp_path):
    xyz = synthetic_fov_trace(3000, 4).xyz
    path = tmp_path / "fov.csv"
    pr.export_fov_predictions(OracleFov(xyz), xyz, 3, path)
    rep = pr.replay_predictor(path, "fov")
    for i in (0, 10, 50):
        got = rep.predict(xyz[: i + 1], 3, i)
        want = xyz[np.minimum(i + np.arange(1, 4), len(xyz) - 1)]
        assert np.allclose(got, want, rtol=0, atol=1e-15)
        assert score_fov([FovPose.from_vector(got[0])], [FovPose.from_vector(want[0])]) == pytest.approx(1.0)

    bpath = tmp_path / "bw.csv"
    actual = [3e6, 4e6, 2.5e6]
    pr.export_bandwidth_predictions(actual, bpath)
    rb = pr.replay_predictor(bpath, "bandwidth")
    preds = [rb.predict([], i) for i in range(3)]
    assert score_bandwidth(preds, actual).mape == 0.0
    with pytest.raises(ReplayError):
        rb.predict([], 7)


def test_replay_missing_horizon_fails_at_load(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("index,horizon,payload\n0,1,1 0 0\n0,3,1 0 0\n")
    with pytest.raises(ReplayError):
        pr.replay_predictor(p)
    p.write_text("index,horizon\n0,1\n")
    with pytest.raises(ReplayError):
        pr.replay_predictor(p)
    p.write_text("index,horizon,payload\n0,1,1 0\n")
    with pytest.raises(ReplayError):
        pr.replay_predictor(p)
    with pytest.raises(ValueError):
        pr.replay_predictor(p, "weather")


def test_replay_reproduces_builtin_run(tmp_path):
    cfg = SimConfig(duration_s=4)
    fov = kalman_smooth(synthetic_fov_trace(6000, 8))
    bw = synthetic_bandwidth_trace(6000, 8)
    path = tmp_path / "tl.csv"
    pr.export_fov_predictions(TruncatedLinearFov(cfg.fov_threshold_deg, cfg.fov_window), fov.xyz,
                              cfg.max_horizon, path, cfg.fov_window)
    a = run_simulation(cfg, bw, fov)
    b = run_simulation(cfg.replace(fov_predictor="replay", fov_replay=str(path)), bw, fov)
    assert a.frames == b.frames
