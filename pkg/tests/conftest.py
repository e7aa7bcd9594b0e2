import math

import numpy as np
import pytest

from fovstream import _kernels_py, geometry as geo
from fovstream.quality import preset

try:
    from fovstream import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = [("python", _kernels_py)] + ([("cython", _compiled)] if _compiled is not None else [])


@pytest.fixture(scope="session")
def grid():
    return geo.ErpGrid()


@pytest.fixture(scope="session")
def models():
    return preset("stable-scene")


@pytest.fixture(params=[name for name, _ in BACKENDS])
def backend(request, monkeypatch):
    """Run the test once per kernel backend by swapping the module the geometry code calls."""
    mod = dict(BACKENDS)[request.param]
    monkeypatch.setattr(geo, "_k", mod)
    return mod


def oracle_tile(dirs, rows, cols):
    """Tile index of unit vectors, written out from the ERP mapping (pixel centres, x fwd, y left, z up)."""
    dirs = np.asarray(dirs, dtype=float)
    lon = np.arctan2(dirs[:, 1], dirs[:, 0])
    lat = np.arcsin(np.clip(dirs[:, 2], -1.0, 1.0))
    u = (math.pi - lon) / (2 * math.pi)  # 0 at lon=+180 (left edge), grows rightwards
    v = (math.pi / 2 - lat) / math.pi
    c = np.minimum((u * cols).astype(int), cols - 1) % cols
    r = np.minimum((v * rows).astype(int), rows - 1)
    return r * cols + c


def camera_axes(yaw_deg, pitch_deg):
    y, p = math.radians(yaw_deg), math.radians(pitch_deg)
    f = np.array([math.cos(p) * math.cos(y), math.cos(p) * math.sin(y), math.sin(p)])
    l = np.array([-math.sin(y), math.cos(y), 0.0])
    u = np.cross(f, l)
    return f, l, u


def mc_frustum(yaw_deg, pitch_deg, h, v, n, seed):
    """n directions uniform (by solid angle) inside a rectilinear viewport, by cap rejection."""
    rng = np.random.default_rng(seed)
    f, l, u = camera_axes(yaw_deg, pitch_deg)
    th, tv = math.tan(math.radians(h) / 2), math.tan(math.radians(v) / 2)
    cos_cap = 1.0 / math.sqrt(1 + th * th + tv * tv)
    out = []
    got = 0
    while got < n:
        m = 2 * (n - got) + 1000
        z = 1.0 - rng.random(m) * (1.0 - cos_cap)
        phi = rng.random(m) * 2 * math.pi
        s = np.sqrt(1 - z * z)
        d = z[:, None] * f + (s * np.cos(phi))[:, None] * l + (s * np.sin(phi))[:, None] * u
        cf, cl, cu = d @ f, d @ l, d @ u
        keep = (np.abs(cl) <= th * cf) & (np.abs(cu) <= tv * cf)
        out.append(d[keep])
        got += int(keep.sum())
    return np.concatenate(out)[:n]


# one verdict line per acceptance criterion, repeated at the end of the run
VERDICTS: dict = {}


def verdict(n: int, ok: bool, detail: str = ""):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    VERDICTS[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
