"""Calibration configuration: nested dataclasses with YAML round-tripping.

Every field has a default; a YAML file overrides any subset of them and
command-line flags override the file. Unknown keys are rejected so typos
do not pass silently.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import yaml

from .camera import Intrinsics
from .pattern import PatternSpec


@dataclass
class SensorConfig:
    width: int = 346
    height: int = 260


@dataclass
class PatternConfig:
    rows: int = 4
    cols: int = 9
    spacing: float = 0.03
    circle_radius: float = 0.006
    asymmetric: bool = True

    def spec(self):
        return PatternSpec(self.rows, self.cols, self.spacing, self.circle_radius, self.asymmetric)


@dataclass
class WindowingSection:
    tau_us: int = 15000
    min_mult: float = 1.0
    max_mult: float = 4.0
    gap_mult: float = 2.0
    growth_mult: float = 0.5
    max_events: int = 30000


@dataclass
class ClusteringConfig:
    eps: float = 3.0
    min_pts: int = 4
    min_cluster_size: int = 8


@dataclass
class FeatureConfig:
    mode: str = "soft"
    k: int = 3
    tol_d: float = 0.25
    tol_c: float = 0.25
    tol_soft: float = 0.35
    min_coverage: float = 0.5


@dataclass
class DetectionConfig:
    tol_grid: float = 3.0
    max_hull_angle: float = 165.0
    max_row_rotation_rate: float = 4.0  # rad/s between consecutive accepted frames


@dataclass
class InitConfig:
    ransac_iterations: int = 200
    inlier_tol_px: float = 2.0
    min_inlier_fraction: float = 0.6
    max_trans_vel: float = 5.0
    max_rot_vel: float = 6.0
    tol_cv_c: float = 0.5
    tol_cv_r: float = 0.4
    cv_assign_factor: float = 1.5
    min_features: int = None  # None -> ceil(rows * cols / 3)
    refine: bool = True
    max_refine_frames: int = 40

    def min_features_for(self, spec):
        return self.min_features if self.min_features is not None else math.ceil(spec.size / 3)


@dataclass
class SplineConfig:
    degree: int = 3
    max_gap_s: float = 1.0
    min_frames_per_segment: int = None  # None -> degree + 2
    ctrl_per_frame: float = 0.5

    def min_frames(self):
        return self.min_frames_per_segment if self.min_frames_per_segment is not None else self.degree + 2


@dataclass
class OptimizerConfig:
    huber_delta: float = None  # meters; None -> huber_mad_factor * MAD
    huber_mad_factor: float = 1.345
    max_iters: int = 50
    cost_tol: float = 1e-6
    grad_tol: float = 1e-12
    step_tol: float = 1e-10
    max_rejections: int = 10
    fixed_intrinsics: list = field(default_factory=list)
    augment: bool = True
    augment_dt_max_us: float = None  # None -> max_mult * tau / 2
    augment_d_max_factor: float = 1.5


@dataclass
class CalibrationConfig:
    sensor: SensorConfig = field(default_factory=SensorConfig)
    pattern: PatternConfig = field(default_factory=PatternConfig)
    windowing: WindowingSection = field(default_factory=WindowingSection)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    init: InitConfig = field(default_factory=InitConfig)
    spline: SplineConfig = field(default_factory=SplineConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    threads: int = 1

    def validate(self):
        if self.features.mode not in ("hard", "soft"):
            raise ValueError(f"features.mode must be 'hard' or 'soft', got {self.features.mode!r}")
        if self.spline.degree < 1:
            raise ValueError("spline.degree must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        self.pattern.spec()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data or {}, "").validate()

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if data is not None and not isinstance(data, dict):
            raise ValueError(f"{path}: configuration must be a mapping")
        return cls.from_dict(data)


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ValueError(f"{prefix or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown configuration keys: {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


@dataclass
class NoiseSection:
    pixel_jitter: float = 0.0
    clutter_fraction: float = 0.0
    timestamp_jitter_us: float = 0.0


@dataclass
class IntrinsicsSection:
    fx: float = 340.0
    fy: float = 340.0
    cx: float = 173.0
    cy: float = 130.0
    dist: list = field(default_factory=lambda: [0.35, 0.0, 0.0, 0.0, 0.0])

    def intrinsics(self):
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, tuple(self.dist))


@dataclass
class SceneConfig:
    """Synthetic scene for ``evcal simulate``."""

    duration: float = 10.0
    speed: float = 1.0
    event_rate: float = 1e5
    seed: int = 0
    format: str = "csv"
    sensor: SensorConfig = field(default_factory=SensorConfig)
    pattern: PatternConfig = field(default_factory=PatternConfig)
    intrinsics: IntrinsicsSection = field(default_factory=IntrinsicsSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    pole_sharpness: float = 2.0
    min_flow: float = 10.0
    quantize: bool = True

    def validate(self):
        if self.format not in ("csv", "binary"):
            raise ValueError(f"format must be 'csv' or 'binary', got {self.format!r}")
        if self.duration < 0 or self.event_rate < 0:
            raise ValueError("duration and event_rate must be non-negative")
        self.pattern.spec()
        self.intrinsics.intrinsics()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data or {}, "").validate()

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if data is not None and not isinstance(data, dict):
            raise ValueError(f"{path}: scene must be a mapping")
        return cls.from_dict(data)
