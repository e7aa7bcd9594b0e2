"""Simulation configuration: one flat dataclass, loadable from YAML.

YAML files may group keys under any top-level section names (``budget:``,
``timing:`` ...); sections are flattened one level before validation, so
``budget: {eta: 0.5}`` and ``eta: 0.5`` mean the same thing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import yaml

from .allocator import DEFAULT_BORDERS, DEFAULT_RI_SIZES

VARIANTS = ("proposed", "simplified", "bm1", "bm2", "bm3")


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    variant: str = "proposed"
    duration_s: float = 60.0
    seed: int = 0
    quality_preset: str = "stable-scene"
    presets_file: str | None = None

    # ERP grid and viewport
    width_px: int = 8192
    height_px: int = 4096
    tile_px: int = 256
    h_extent: float = 90.0
    v_extent: float = 90.0

    # pipeline timing (ms); None means derived from fps
    fps: float = 30.0
    encode_ms: float | None = None
    decode_ms: float | None = None
    propagation_ms: float = 15.0
    polls_per_frame: int = 3
    sender_capacity: int = 10
    max_display_delay_frames: int = 20

    # budget control
    frames_per_segment: int = 30
    eta: float = 0.66
    a_param: float = 1.20
    b_param: float = 1.00
    initial_bw_mbps: float = 20.0
    bw_bin_ms: float = 200.0
    bw_history_bins: int = 15

    # region candidates
    borders: list = field(default_factory=lambda: list(DEFAULT_BORDERS))
    ri_sizes: list = field(default_factory=lambda: list(DEFAULT_RI_SIZES))
    simplified_border: int = 50
    simplified_ri: int = 4

    # benchmarks
    bm1_width_deg: float = 140.0
    bm2_border: int = 50
    bm3_border: int = 50
    bm3_ip_ratio: float = 4.0

    # predictors
    fov_predictor: str = "truncated-linear"  # truncated-linear | oracle | hold | replay
    fov_threshold_deg: float = 0.02
    fov_window: int = 30
    fov_replay: str | None = None
    bw_predictor: str = "rls"  # rls | harmonic | oracle | fixed (initial_bw_mbps) | replay
    bw_replay: str | None = None
    max_horizon: int = 60

    # cold-start priors
    alpha_pf_prior: float = 0.9

    # geometry resolution
    coverage_samples: int = 256
    hist_samples: int = 32
    replay_stride: int = 3

    @property
    def frame_ms(self) -> float:
        return 1000.0 / self.fps

    @property
    def encode_time(self) -> float:
        return self.frame_ms if self.encode_ms is None else self.encode_ms

    @property
    def decode_time(self) -> float:
        return self.frame_ms / 3.0 if self.decode_ms is None else self.decode_ms

    @property
    def poll_ms(self) -> float:
        return self.frame_ms / self.polls_per_frame

    @property
    def duration_ms(self) -> float:
        return self.duration_s * 1000.0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        positive = ("duration_s", "fps", "propagation_ms", "eta", "a_param", "frames_per_segment",
                    "sender_capacity", "max_display_delay_frames", "polls_per_frame", "hist_samples",
                    "coverage_samples", "replay_stride", "bm3_ip_ratio", "max_horizon")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.propagation_ms < 0 or self.b_param < 0:
            raise ConfigError("propagation_ms and b_param must be >= 0")
        if not 0 < self.eta <= 1:
            raise ConfigError("eta must be in (0, 1]")
        if not self.borders or not self.ri_sizes:
            raise ConfigError("candidate sets must be non-empty")
        total = (self.width_px // self.tile_px) * (self.height_px // self.tile_px)
        for k in list(self.ri_sizes) + [self.simplified_ri]:
            if not 1 <= int(k) <= total:
                raise ConfigError(f"RI size {k} outside [1, {total}]")
        if self.fov_predictor == "replay" and not self.fov_replay:
            raise ConfigError("fov_predictor 'replay' needs fov_replay path")
        if self.bw_predictor == "replay" and not self.bw_replay:
            raise ConfigError("bw_predictor 'replay' needs bw_replay path")
        return self

    def replace(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "SimConfig":
        flat = {}
        for k, v in (d or {}).items():
            if isinstance(v, dict) and k not in _FIELD_NAMES:
                flat.update(v)
            else:
                flat[k] = v
        unknown = set(flat) - _FIELD_NAMES
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**flat).validate()


_FIELD_NAMES = {f.name for f in fields(SimConfig)}


def load_config(path=None, **overrides) -> SimConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            try:
                data = yaml.safe_load(fh) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = SimConfig.from_dict(data)
    clean = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**clean) if clean else cfg
