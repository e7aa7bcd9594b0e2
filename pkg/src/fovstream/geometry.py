"""Equirectangular tiling, viewport projection and coding-region layout.

Axis convention: x forward, y left, z up.  Longitude ``atan2(y, x)`` grows
to the left and maps to decreasing ERP column; latitude ``asin(z)`` maps to
decreasing ERP row.  A viewport has no roll: its "up" axis is the
projection of world z.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import NamedTuple

import numpy as np

if os.environ.get("FOVSTREAM_PURE_PYTHON"):
    from . import _kernels_py as _k
    BACKEND = "python"
else:
    try:
        from . import _kernels as _k
        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _k
        BACKEND = "python"

DEG2 = (180.0 / math.pi) ** 2
SPHERE_DEG2 = 4.0 * math.pi * DEG2
DEFAULT_SAMPLES = 256

REGION_NONE = 0
REGION_PF = 1
REGION_PFPLUS = 2
REGION_RI = 3


class TileId(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class ErpGrid:
    width_px: int = 8192
    height_px: int = 4096
    tile_px: int = 256

    def __post_init__(self):
        if self.tile_px <= 0 or self.width_px % self.tile_px or self.height_px % self.tile_px:
            raise ValueError(
                f"tile size {self.tile_px} must divide {self.width_px}x{self.height_px}"
            )

    @property
    def rows(self) -> int:
        return self.height_px // self.tile_px

    @property
    def cols(self) -> int:
        return self.width_px // self.tile_px

    @property
    def total(self) -> int:
        return self.rows * self.cols

    def flat(self, tile: TileId) -> int:
        if not (0 <= tile.row < self.rows and 0 <= tile.col < self.cols):
            raise ValueError(f"{tile} outside {self.rows}x{self.cols} grid")
        return tile.row * self.cols + tile.col

    def tile(self, index: int) -> TileId:
        return TileId(int(index) // self.cols, int(index) % self.cols)

    def tiles(self, indices) -> frozenset:
        return frozenset(self.tile(i) for i in np.asarray(indices).ravel())

    def indices(self, tiles) -> np.ndarray:
        return np.array(sorted(self.flat(t) for t in tiles), dtype=np.int64)

    @cached_property
    def row_area(self) -> np.ndarray:
        """Spherical area of one tile in each row, square degrees."""
        edges = math.pi * (0.5 - np.arange(self.rows + 1) / self.rows)
        dlon = 2.0 * math.pi / self.cols
        return dlon * (np.sin(edges[:-1]) - np.sin(edges[1:])) * DEG2

    @cached_property
    def tile_area(self) -> np.ndarray:
        return np.repeat(self.row_area, self.cols)

    @property
    def mean_tile_area(self) -> float:
        return SPHERE_DEG2 / self.total

    def tile_of(self, dirs) -> np.ndarray:
        return _k.tile_index(np.asarray(dirs, dtype=float), self.rows, self.cols)


@dataclass(frozen=True)
class FovPose:
    """Viewport centre direction plus angular extents in degrees."""

    x: float
    y: float
    z: float
    h_extent: float = 90.0
    v_extent: float = 90.0

    def __post_init__(self):
        n = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"pose direction not unit length (|v|={n})")

    @classmethod
    def from_vector(cls, v, h_extent=90.0, v_extent=90.0) -> "FovPose":
        v = np.asarray(v, dtype=float)
        v = v / np.linalg.norm(v)
        return cls(float(v[0]), float(v[1]), float(v[2]), h_extent, v_extent)

    @classmethod
    def from_angles(cls, yaw_deg, pitch_deg, h_extent=90.0, v_extent=90.0) -> "FovPose":
        return cls.from_vector(angles_to_vector(yaw_deg, pitch_deg), h_extent, v_extent)

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def yaw(self) -> float:
        return math.degrees(math.atan2(self.y, self.x))

    @property
    def pitch(self) -> float:
        return math.degrees(math.asin(max(-1.0, min(1.0, self.z))))

    def widened(self, border_deg: float) -> "FovPose":
        return FovPose(self.x, self.y, self.z, self.h_extent + border_deg, self.v_extent + border_deg)

    def basis(self):
        """(forward, left, up) orthonormal camera axes."""
        return self._basis

    @cached_property
    def _basis(self):
        yaw = math.atan2(self.y, self.x)
        p = math.asin(max(-1.0, min(1.0, self.z)))
        cy, sy, cp, sp = math.cos(yaw), math.sin(yaw), math.cos(p), math.sin(p)
        # plain tuples: the kernels index them element-wise
        return (cp * cy, cp * sy, sp), (-sy, cy, 0.0), (-sp * cy, -sp * sy, cp)


def angles_to_vector(yaw_deg, pitch_deg) -> np.ndarray:
    yaw = np.radians(yaw_deg)
    pitch = np.radians(pitch_deg)
    cp = np.cos(pitch)
    return np.stack([cp * np.cos(yaw), cp * np.sin(yaw), np.sin(pitch)], axis=-1)


def vector_to_angles(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1)
    yaw = np.degrees(np.arctan2(v[..., 1], v[..., 0]))
    pitch = np.degrees(np.arcsin(np.clip(v[..., 2] / n, -1.0, 1.0)))
    return yaw, pitch


def ws_weight(row_px: int, grid: ErpGrid) -> float:
    """ERP row weight cos((i/m - 1/2) pi) with m the frame height."""
    m = grid.height_px
    if not 0 <= row_px < m:
        raise ValueError(f"row {row_px} outside [0, {m})")
    return math.cos((row_px / m - 0.5) * math.pi)


def ws_weight_map(grid: ErpGrid) -> np.ndarray:
    m = grid.height_px
    return np.cos((np.arange(m) / m - 0.5) * np.pi)


def ws_mse(reference, distorted) -> float:
    """Row-weighted MSE between two ERP images (H x W [x C])."""
    reference = np.asarray(reference, dtype=float)
    distorted = np.asarray(distorted, dtype=float)
    if reference.shape != distorted.shape:
        raise ValueError("image shapes differ")
    m = reference.shape[0]
    w = np.cos((np.arange(m) / m - 0.5) * np.pi)
    w = w.reshape((m,) + (1,) * (reference.ndim - 1))
    w = np.broadcast_to(w, reference.shape)
    return float(np.sum((reference - distorted) ** 2 * w) / np.sum(w))


class FovSamples(NamedTuple):
    directions: np.ndarray  # (n, 3) unit vectors
    weights: np.ndarray  # (n,) solid angle per sample, steradians


@lru_cache(maxsize=64)
def _camera_samples(h_extent: float, v_extent: float, k: int):
    # midpoint grid uniform in angle, gnomonic Jacobian for weights
    ha = math.radians(h_extent) / 2.0
    va = math.radians(v_extent) / 2.0
    a = (np.arange(k) + 0.5) / k * 2.0 * ha - ha
    b = (np.arange(k) + 0.5) / k * 2.0 * va - va
    A, B = np.meshgrid(a, b, indexing="xy")
    s, t = np.tan(A).ravel(), np.tan(B).ravel()
    raw = np.stack([np.ones_like(s), s, t], axis=1)
    norm = np.sqrt(1.0 + s * s + t * t)
    dirs = raw / norm[:, None]
    sec2 = (1.0 + s * s) * (1.0 + t * t)
    w = sec2 / norm**3 * (2.0 * ha / k) * (2.0 * va / k)
    dirs.setflags(write=False)
    w.setflags(write=False)
    return dirs, w


def fov_sample_directions(pose: FovPose, n_samples: int = DEFAULT_SAMPLES**2) -> FovSamples:
    """Deterministic k x k sample of the viewport (k = isqrt(n_samples)).

    Samples sit at the midpoints of an angle-uniform grid, so ``n_samples=1``
    returns the centre direction.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    k = math.isqrt(n_samples)
    cam, w = _camera_samples(float(pose.h_extent), float(pose.v_extent), k)
    f, l, u = pose.basis()
    world = cam @ np.array([f, l, u])
    return FovSamples(world, w.copy())


def frustum_solid_angle(h_extent: float, v_extent: float) -> float:
    """Exact solid angle (sr) of a rectilinear viewport."""
    return 4.0 * math.asin(math.sin(math.radians(h_extent) / 2) * math.sin(math.radians(v_extent) / 2))


def _hull_tangents(pose: FovPose, samples_per_axis: int):
    return _tangents(float(pose.h_extent), float(pose.v_extent), samples_per_axis)


@lru_cache(maxsize=256)
def _tangents(h_extent: float, v_extent: float, samples_per_axis: int):
    # half-extent of the hull of the 4x-density sample grid
    shrink = 1.0 - 1.0 / (4 * samples_per_axis)
    th = math.tan(math.radians(h_extent) / 2.0 * shrink)
    tv = math.tan(math.radians(v_extent) / 2.0 * shrink)
    return th, tv


def _is_full_sphere(pose: FovPose) -> bool:
    return pose.h_extent >= 360.0 and pose.v_extent >= 180.0


def coverage_mask(pose: FovPose, grid: ErpGrid, samples_per_axis: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Boolean per-tile mask of tiles touched by the viewport."""
    if _is_full_sphere(pose):
        return np.ones(grid.total, dtype=bool)
    if pose.h_extent >= 180.0 or pose.v_extent >= 180.0:
        raise ValueError("rectilinear viewport extents must be < 180 degrees")
    th, tv = _hull_tangents(pose, samples_per_axis)
    f, l, u = pose.basis()
    return _k.coverage_mask(f, l, u, th, tv, grid.rows, grid.cols).view(bool)


def coverage_masks(pose: FovPose, borders, grid: ErpGrid, samples_per_axis: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Coverage of ``pose`` widened by each of ``borders`` (degrees), one row per border."""
    h, v = float(pose.h_extent), float(pose.v_extent)
    if max(borders) + max(h, v) >= 180.0:
        return np.stack([coverage_mask(pose.widened(b), grid, samples_per_axis) for b in borders])
    tans = [_tangents(h + b, v + b, samples_per_axis) for b in borders]
    f, l, u = pose.basis()
    return _k.coverage_masks(f, l, u, tans, grid.rows, grid.cols).view(bool)


def tiles_covering_fov(pose: FovPose, grid: ErpGrid, samples_per_axis: int = DEFAULT_SAMPLES) -> frozenset:
    return grid.tiles(np.flatnonzero(coverage_mask(pose, grid, samples_per_axis)))


def border_mask(pose: FovPose, border_deg: float, grid: ErpGrid, samples_per_axis: int = DEFAULT_SAMPLES) -> np.ndarray:
    if border_deg <= 0:
        return np.zeros(grid.total, dtype=bool)
    inner = coverage_mask(pose, grid, samples_per_axis)
    outer = coverage_mask(pose.widened(border_deg), grid, samples_per_axis)
    return outer & ~inner


def border_region(pose: FovPose, border_deg: float, grid: ErpGrid, samples_per_axis: int = DEFAULT_SAMPLES) -> frozenset:
    """Tiles covering the viewport widened by ``border_deg`` (half on each side) minus the viewport tiles."""
    return grid.tiles(np.flatnonzero(border_mask(pose, border_deg, grid, samples_per_axis)))


def nominal_border_area(border_deg: float, h_extent: float = 90.0, v_extent: float = 90.0) -> float:
    """Border area used for rate normalisation: (h+b)(v+b) - h*v."""
    return (h_extent + border_deg) * (v_extent + border_deg) - h_extent * v_extent


def ri_block(offset: int, count: int, total: int) -> np.ndarray:
    return (int(offset) + np.arange(int(count))) % total


def ri_tiles_at(frame_index: int, ri_tile_count: int, grid: ErpGrid) -> frozenset:
    """Raster-order intra block of ``ri_tile_count`` tiles for ``frame_index``."""
    if not 1 <= ri_tile_count <= grid.total:
        raise ValueError(f"ri_tile_count must be in [1, {grid.total}]")
    return grid.tiles(ri_block(frame_index * ri_tile_count, ri_tile_count, grid.total))


def refresh_period(ri_tile_count: int, grid: ErpGrid) -> int:
    """Frames needed for the rotating intra block to sweep every tile."""
    return -(-grid.total // ri_tile_count)


def vertical_slice_mask(pose: FovPose, grid: ErpGrid, width_deg: float = 140.0) -> np.ndarray:
    """Full-height tile columns intersecting [yaw - w/2, yaw + w/2]."""
    dlon = 360.0 / grid.cols
    # column c spans lon (180 - (c+1) dlon, 180 - c dlon]
    centres = 180.0 - (np.arange(grid.cols) + 0.5) * dlon
    off = (centres - pose.yaw + 180.0) % 360.0 - 180.0
    cols = np.abs(off) < width_deg / 2.0 + dlon / 2.0
    return np.tile(cols, grid.rows)


@dataclass
class RegionLayout:
    """Per-frame PF / PF+ / RI assignment (``region`` holds REGION_* codes per tile)."""

    grid: ErpGrid
    region: np.ndarray
    a_pf: float
    a_pfplus: float
    a_ri: float
    lambda_pf: float = 1.0
    lambda_pfplus: float = 1.0
    border_deg: float = 0.0
    ri_tile_count: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_masks(cls, grid, pf, pfplus, ri, border_deg=0.0, ri_tile_count=0):
        region = np.zeros(grid.total, dtype=np.int8)
        region[pf] = REGION_PF
        region[pfplus] = REGION_PFPLUS
        region[ri] = REGION_RI
        areas = np.bincount(region, weights=grid.tile_area, minlength=4)
        lam = 1.0 - ri_tile_count / grid.total
        return cls(
            grid=grid,
            region=region,
            a_pf=float(areas[REGION_PF]),
            a_pfplus=float(areas[REGION_PFPLUS]),
            a_ri=float(areas[REGION_RI]),
            lambda_pf=lam,
            lambda_pfplus=lam,
            border_deg=border_deg,
            ri_tile_count=ri_tile_count,
        )

    def _tiles(self, code):
        return self.grid.tiles(np.flatnonzero(self.region == code))

    @property
    def pf_tiles(self) -> frozenset:
        return self._tiles(REGION_PF)

    @property
    def pfplus_tiles(self) -> frozenset:
        return self._tiles(REGION_PFPLUS)

    @property
    def ri_tiles(self) -> frozenset:
        return self._tiles(REGION_RI)

    @property
    def coded(self) -> np.ndarray:
        return self.region != REGION_NONE


def build_layout(
    pose: FovPose,
    border_deg: float,
    ri_tile_count: int,
    frame_index: int,
    grid: ErpGrid,
    samples_per_axis: int = DEFAULT_SAMPLES,
    ri_offset: int | None = None,
) -> RegionLayout:
    """PF = viewport tiles minus RI, PF+ = border tiles minus RI, RI = rotating block.

    ``ri_offset`` overrides the default raster offset ``frame_index * ri_tile_count``
    (the simulator keeps its own cursor so skipped frames do not leave holes).
    """
    inner = coverage_mask(pose, grid, samples_per_axis)
    if border_deg > 0:
        outer = coverage_mask(pose.widened(border_deg), grid, samples_per_axis)
    else:
        outer = inner
    ri = np.zeros(grid.total, dtype=bool)
    if ri_tile_count > 0:
        off = frame_index * ri_tile_count if ri_offset is None else ri_offset
        ri[ri_block(off, ri_tile_count, grid.total)] = True
    pf = inner & ~ri
    pfplus = outer & ~inner & ~ri
    return RegionLayout.from_masks(grid, pf, pfplus, ri, border_deg, ri_tile_count)


def tile_histogram(pose: FovPose, grid: ErpGrid, samples_per_axis: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Fraction of the viewport's solid angle falling in each tile (sums to 1)."""
    cam, w = _unit_samples(float(pose.h_extent), float(pose.v_extent), samples_per_axis)
    f, l, u = pose.basis()
    return _k.tile_histogram(f, l, u, cam, w, grid.rows, grid.cols)


@lru_cache(maxsize=64)
def _unit_samples(h_extent: float, v_extent: float, k: int):
    # camera samples with weights normalised to sum to 1
    cam, w = _camera_samples(h_extent, v_extent, k)
    w = w / w.sum()
    w.setflags(write=False)
    return cam, w


def region_hit_rates(hist: np.ndarray, region: np.ndarray):
    """(alpha_pf, alpha_pfplus, alpha_ri, alpha_uncoded) from a tile histogram."""
    by = np.bincount(region, weights=hist, minlength=4) / hist.sum()
    a_pf, a_pp, a_ri = float(by[REGION_PF]), float(by[REGION_PFPLUS]), float(by[REGION_RI])
    return a_pf, a_pp, a_ri, 1.0 - a_pf - a_pp - a_ri


def hit_rates(
    predicted: FovPose,
    actual: FovPose,
    layout: RegionLayout,
    grid: ErpGrid,
    samples_per_axis: int = DEFAULT_SAMPLES,
):
    """Solid-angle fractions of the actual viewport landing in each region of ``layout``."""
    return region_hit_rates(tile_histogram(actual, grid, samples_per_axis), layout.region)


def fov_overlap(predicted: FovPose, actual: FovPose, samples_per_axis: int = DEFAULT_SAMPLES) -> float:
    """Fraction of the actual viewport's solid angle inside the predicted viewport."""
    samples = fov_sample_directions(actual, samples_per_axis**2)
    f, l, u = predicted.basis()
    th = math.tan(math.radians(predicted.h_extent) / 2)
    tv = math.tan(math.radians(predicted.v_extent) / 2)
    inside = _k.frustum_weight(samples.directions, samples.weights, f, l, u, th, tv)
    return inside / float(samples.weights.sum())
