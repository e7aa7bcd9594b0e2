import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fovstream.geometry import angles_to_vector, vector_to_angles
from fovstream.traces import (
    FRAME_MS,
    BandwidthTrace,
    FovTrace,
    TraceError,
    TraceWarning,
    bin_throughput,
    flip_extend,
    kalman_smooth,
    parse_bandwidth_trace,
    parse_fov_trace,
    quat_forward,
    scale_bandwidth,
    synthetic_bandwidth_trace,
    synthetic_fov_trace,
    validate_bandwidth_file,
    validate_fov_file,
    write_bandwidth_trace,
    write_fov_trace,
)


def ang(a, b):
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=-1), -1, 1)))


# --- orientation conventions --------------------------------------------------------

def test_zero_angles_forward():
    assert np.allclose(angles_to_vector(0.0, 0.0), [1, 0, 0], atol=1e-15)
    assert np.allclose(angles_to_vector(90.0, 0.0), [0, 1, 0], atol=1e-15)  # yaw left
    assert np.allclose(angles_to_vector(0.0, 90.0), [0, 0, 1], atol=1e-15)


def test_identity_quaternion():
    assert np.allclose(quat_forward(1, 0, 0, 0), [[1, 0, 0]])
    # 90 degrees about z turns forward to the left
    c = math.cos(math.pi / 4)
    assert np.allclose(quat_forward(c, 0, 0, c), [[0, 1, 0]], atol=1e-12)
    # unnormalised input gives the same direction
    assert np.allclose(quat_forward(2, 0, 0, 0), [[1, 0, 0]])


@settings(max_examples=200)
@given(st.floats(-179.9, 179.9), st.floats(-89.9, 89.9))
def test_angles_roundtrip(yaw, pitch):
    y, p = vector_to_angles(angles_to_vector(yaw, pitch))
    assert float(y) == pytest.approx(yaw, abs=1e-9)
    assert float(p) == pytest.approx(pitch, abs=1e-9)


def test_fov_trace_rejects_bad_input():
    with pytest.raises(TraceError):
        FovTrace([0.0, 0.0], [[1, 0, 0], [1, 0, 0]])
    with pytest.raises(TraceError):
        FovTrace([0.0], [[0, 0, 0]])
    with pytest.raises(TraceError):
        FovTrace([], np.zeros((0, 3)))


def test_at_frame_rate():
    tr = FovTrace.from_angles(np.linspace(0, 10, 11), np.zeros(11), frame_ms=10.0)
    out = tr.at_frame_rate(5.0)
    assert len(out) == 22
    assert np.allclose(np.linalg.norm(out.xyz, axis=1), 1.0)
    yaw, _ = out.angles()
    assert yaw[1] == pytest.approx(0.5, abs=1e-3)


# --- Kalman -----------------------------------------------------------------------------

def test_kalman_constant_unchanged():
    v = angles_to_vector(35.0, -12.0)
    tr = FovTrace.from_xyz(np.tile(v, (300, 1)))
    out = kalman_smooth(tr)
    assert np.abs(out.xyz[30:] - v).max() < 1e-6


def test_kalman_impulse_reduced():
    yaw = np.zeros(200)
    yaw[100] = 10.0
    tr = FovTrace.from_angles(yaw, np.zeros(200))
    out = kalman_smooth(tr)
    before = ang(tr.xyz[100], angles_to_vector(0, 0))
    after = ang(out.xyz[100], angles_to_vector(0, 0))
    assert after <= 0.5 * before


def test_kalman_unit_norm_and_short():
    tr = synthetic_fov_trace(5000, 3)
    out = kalman_smooth(tr)
    assert np.allclose(np.linalg.norm(out.xyz, axis=1), 1.0, atol=1e-12)
    one = FovTrace.from_angles([5.0], [1.0])
    assert np.array_equal(kalman_smooth(one).xyz, one.xyz)


# --- flip / extend -------------------------------------------------------------------------

def test_flip_extend_identity():
    tr = synthetic_fov_trace(3000, 1)
    out = flip_extend(tr, tr.duration_ms)
    assert np.array_equal(out.xyz, tr.xyz)


def test_flip_extend_double():
    tr = synthetic_fov_trace(3000, 1)
    n = len(tr)
    out = flip_extend(tr, 2 * tr.duration_ms)
    assert len(out) == 2 * n
    assert np.array_equal(out.xyz[n:], tr.xyz[::-1])
    # no jump at the junction: the step there is no larger than any original step
    steps = ang(tr.xyz[1:], tr.xyz[:-1])
    assert ang(out.xyz[n], out.xyz[n - 1]) <= steps.max()
    assert np.all(np.diff(out.timestamps) > 0)


def test_flip_extend_long():
    tr = synthetic_fov_trace(1000, 2)
    out = flip_extend(tr, 10_000)
    assert len(out) == round(10_000 / FRAME_MS)
    assert np.all(ang(out.xyz[1:], out.xyz[:-1]) <= ang(tr.xyz[1:], tr.xyz[:-1]).max() + 1e-9)


# --- bandwidth ----------------------------------------------------------------------------

def test_bandwidth_trace_queries():
    bw = BandwidthTrace.from_rates([1e6, 0.0, 2e6], 1000.0)
    assert bw.capacity_between(0, 3000) == pytest.approx(3e6)
    assert bw.capacity_between(500, 1500) == pytest.approx(5e5)
    assert bw.time_to_deliver(0.0, 1.5e6) == pytest.approx(2250.0)
    assert bw.time_to_deliver(100.0, 1e9) == math.inf
    assert bw.time_to_deliver(100.0, 0.0) == 100.0
    assert np.allclose(bw.bin_capacity(3000.0, 3, 1000.0), [1e6, 0.0, 2e6])


def test_bandwidth_rejects():
    with pytest.raises(TraceError):
        BandwidthTrace([0.0, 1.0], [-1.0])
    with pytest.raises(TraceError):
        BandwidthTrace([0.0, 0.0], [1.0])


def test_scale_identity_and_constant():
    bw = synthetic_bandwidth_trace(10_000, 3)
    same = scale_bandwidth(bw, bw.rates_bps.max())
    assert np.allclose(same.bits, bw.bits, rtol=1e-12)
    const = BandwidthTrace.constant(10e6, 5000)
    assert np.allclose(scale_bandwidth(const, 200e6).rates_bps, 200e6)


def test_scale_preserves_cv():
    bw = synthetic_bandwidth_trace(20_000, 5)
    r0 = bw.rates_bps
    r1 = scale_bandwidth(bw, 37e6).rates_bps
    assert r0.std() / r0.mean() == pytest.approx(r1.std() / r1.mean(), rel=1e-9)
    assert r1.max() == pytest.approx(37e6)


def test_scale_all_zero():
    with pytest.raises(TraceError):
        scale_bandwidth(BandwidthTrace.from_rates([0.0, 0.0]), 1e6)


def test_bin_throughput():
    t = np.arange(0, 1000, 10.0)
    out = bin_throughput(t, np.full(len(t), 500.0), 0.0, 1000.0, 200.0)
    assert np.allclose(out, 10_000.0)
    assert np.array_equal(bin_throughput([], [], 0.0, 600.0), np.zeros(3))
    rng = np.random.default_rng(0)
    tt = rng.uniform(0, 1000, 200)
    bb = rng.uniform(0, 1e4, 200)
    assert bin_throughput(tt, bb, 0.0, 1000.0).sum() == pytest.approx(bb.sum())


def test_synthetic_dropouts():
    bw = synthetic_bandwidth_trace(30_000, 4, dropouts=3)
    assert (bw.rates_bps == 0).any()
    assert bw.rates_bps.max() == pytest.approx(200e6)


@pytest.mark.parametrize("style", ["explore", "static", "pole", "sweep"])
def test_synthetic_fov_styles(style):
    a = synthetic_fov_trace(5000, 9, style=style)
    b = synthetic_fov_trace(5000, 9, style=style)
    assert np.array_equal(a.xyz, b.xyz)
    assert len(a) == round(5000 / FRAME_MS)
    if style == "pole":
        assert np.abs(a.angles()[1]).max() > 60


# --- IO ----------------------------------------------------------------------------------------

def test_fov_roundtrip(tmp_path):
    tr = synthetic_fov_trace(2000, 6)
    p = tmp_path / "f.csv"
    write_fov_trace(tr, p)
    back = parse_fov_trace(p)
    assert np.array_equal(back.xyz, tr.xyz) and np.array_equal(back.timestamps, tr.timestamps)


def test_bandwidth_roundtrip(tmp_path):
    bw = synthetic_bandwidth_trace(5000, 6)
    p = tmp_path / "b.csv"
    write_bandwidth_trace(bw, p)
    back = parse_bandwidth_trace(p)
    assert np.allclose(back.bits, bw.bits, rtol=1e-12)
    assert np.allclose(back.edges, bw.edges)


@pytest.mark.parametrize("fmt,header,row", [
    ("angles", "timestamp_ms,yaw,pitch", "0,90,0"),
    ("quat", "timestamp_ms,qw,qx,qy,qz", "0,0.7071067811865476,0,0,0.7071067811865476"),
    ("lonlat", "timestamp_ms,lon,lat", "0,0.75,0.5"),
    ("tsinghua", "PlaybackTime,UnitQuaternion.x,UnitQuaternion.y,UnitQuaternion.z,UnitQuaternion.w",
     "0,0,-0.7071067811865476,0,0.7071067811865476"),
])
def test_fov_formats_agree(tmp_path, fmt, header, row):
    # every format encodes "looking 90 degrees to the left"
    p = tmp_path / "f.csv"
    p.write_text(f"{header}\n{row}\n")
    tr = parse_fov_trace(p)
    assert np.allclose(tr.xyz[0], [0, 1, 0], atol=1e-9)


def test_packets_format(tmp_path):
    p = tmp_path / "pk.csv"
    p.write_text("timestamp_ms,bytes\n0,125\n5,125\n12,250\n")
    bw = parse_bandwidth_trace(p, bin_ms=10.0)
    assert np.allclose(bw.bits, [2000.0, 2000.0])
    assert bw.capacity_between(bw.start_ms, bw.end_ms) == pytest.approx(4000.0)


def test_strict_and_lenient(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("timestamp_ms,x,y,z\n0,1,0,0\n10,oops,0,0\n5,1,0,0\n20,0,0,0\n30,0,1,0\n")
    with pytest.raises(TraceError):
        parse_fov_trace(p)
    with pytest.warns(TraceWarning):
        tr = parse_fov_trace(p, strict=False)
    assert list(tr.timestamps) == [0.0, 5.0, 30.0]
    assert len(validate_fov_file(p, strict=False)) == 2
    good = tmp_path / "good.csv"
    write_fov_trace(synthetic_fov_trace(500, 0), good)
    assert validate_fov_file(good) == []


def test_bandwidth_lenient(tmp_path):
    p = tmp_path / "bw.csv"
    p.write_text("timestamp_ms,rate_mbps\n0,10\n100,-3\n200,nan\n300,20\n")
    with pytest.raises(TraceError):
        parse_bandwidth_trace(p)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TraceWarning)
        bw = parse_bandwidth_trace(p, strict=False)
    assert len(bw.bits) == 2
    assert len(validate_bandwidth_file(p, strict=False)) == 2


def test_missing_columns(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(TraceError):
        parse_fov_trace(p)
    with pytest.raises(TraceError):
        parse_fov_trace(p, fmt="xyz")
