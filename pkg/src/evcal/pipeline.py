"""End-to-end calibration: front-end detection, initialization, back-end.

window -> cluster -> extract -> detect -> init -> rectify -> segment ->
approximate -> augment -> solve
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import extract_clusters
from .config import CalibrationConfig
from .errors import ConditioningError, DegenerateGeometryError, InfeasibleCalibrationError
from .events import WindowingConfig, window_events
from .features import extract_features
from .geometry import rot_to_quat
from .initialization import (
    ReferenceFrame,
    cross_validate_features,
    initialize_intrinsics,
    velocity_filter,
)
from .optimizer import EventCorrespondences, SolverOptions, augment_events, solve
from .pattern import detect_grid, orientation_consistency_check
from .spline import approximate_segment, group_segments

log = logging.getLogger(__name__)


@dataclass
class Diagnostics:
    """Per-stage counts, reported with results and infeasibility errors."""

    events: int = 0
    detector_calls: int = 0
    windows_abandoned: int = 0
    detections: int = 0
    orientation_rejected: int = 0
    pnp_rejected: int = 0
    velocity_rejected: int = 0
    cross_validation_rejected: int = 0
    frames: int = 0
    segments: int = 0
    segment_frames_dropped: int = 0
    correspondences_initial: int = 0
    correspondences_augmented: int = 0
    stage: str = "windowing"

    def as_dict(self):
        return dict(self.__dict__)


@dataclass(eq=False)
class PipelineResult:
    config: CalibrationConfig
    result: object  # CalibrationResult
    frames: list
    initial_intrinsics: object
    correspondences: EventCorrespondences = field(repr=False)
    diagnostics: Diagnostics


def windowing_config(cfg):
    w = cfg.windowing
    return WindowingConfig(float(w.tau_us), w.min_mult, w.max_mult, w.gap_mult, w.max_events,
                           w.growth_mult)


def detect_frames(stream, cfg, diag=None):
    """Scan the stream for pattern detections; returns ``ReferenceFrame`` list.

    A detection whose first pattern row turned faster than
    ``detection.max_row_rotation_rate`` since the previous accepted frame
    counts as a failure, so the window keeps growing.
    """
    diag = diag if diag is not None else Diagnostics()
    spec = cfg.pattern.spec()
    cl, fe, de = cfg.clustering, cfg.features, cfg.detection
    state = {"prev": None, "t_prev": None}

    def detector(win):
        pos, neg = extract_clusters(win, cl.eps, cl.min_pts, cl.min_cluster_size)
        feats = extract_features(pos, neg, fe.mode, fe.k, fe.tol_d, fe.tol_c, fe.tol_soft,
                                 fe.min_coverage)
        det = detect_grid(feats, spec, de.tol_grid, previous=state["prev"],
                          max_hull_angle=de.max_hull_angle)
        if not det:
            return det
        if state["prev"] is not None:
            dt = (win.t_ref - state["t_prev"]) * 1e-6
            if dt > 0 and not orientation_consistency_check(det, state["prev"], dt,
                                                            de.max_row_rotation_rate):
                diag.orientation_rejected += 1
                return None
        state["prev"], state["t_prev"] = det, win.t_ref
        return det

    res = window_events(stream, windowing_config(cfg), detector)
    diag.detector_calls = res.attempts
    diag.windows_abandoned = res.abandoned
    diag.detections = len(res.windows)
    return [ReferenceFrame(w, w.detection) for w in res.windows]


def initialize(frames, cfg, diag=None):
    """Intrinsics and poses, then velocity filtering and cross-validation.

    Returns ``(intrinsics, accepted_frames)``.
    """
    diag = diag if diag is not None else Diagnostics()
    spec = cfg.pattern.spec()
    ini = cfg.init
    diag.stage = "initialization"
    if len(frames) < 3:
        raise InfeasibleCalibrationError("no reference frames" if not frames else
                                         f"only {len(frames)} reference frames", diag.as_dict())
    ransac = {
        "iterations": ini.ransac_iterations,
        "inlier_tol_px": ini.inlier_tol_px,
        "min_inliers": max(4, int(np.ceil(ini.min_inlier_fraction * spec.size))),
    }
    try:
        k = initialize_intrinsics(frames, spec, cfg.sensor.width, cfg.sensor.height, ransac,
                                  cfg.seed, ini.refine, ini.max_refine_frames)
    except (ConditioningError, DegenerateGeometryError, ValueError) as exc:
        raise InfeasibleCalibrationError(f"initialization failed: {exc}", diag.as_dict()) from exc
    posed = [f for f in frames if f.accepted]
    diag.pnp_rejected = len(frames) - len(posed)
    kept = velocity_filter(posed, ini.max_trans_vel, ini.max_rot_vel)
    diag.velocity_rejected = len(posed) - len(kept)
    min_feat = ini.min_features_for(spec)
    out = []
    for f in kept:
        cross_validate_features(f, k, spec, cfg.sensor.width, cfg.sensor.height, ini.tol_cv_c,
                                ini.tol_cv_r, ini.cv_assign_factor, min_feat)
        if f.accepted:
            out.append(f)
    diag.cross_validation_rejected = len(kept) - len(out)
    diag.frames = len(out)
    return k, out


def augment_dt_max_us(cfg):
    o = cfg.optimizer
    if o.augment_dt_max_us is not None:
        return float(o.augment_dt_max_us)
    return cfg.windowing.max_mult * cfg.windowing.tau_us / 2.0


def _approximate(ts, samples, degree, n_ctrl):
    """Approximate with ``n_ctrl`` control points, backing off by 10% while
    the least-squares system is ill-conditioned (near one control point per
    sample the pinned ends leave too few interior samples)."""
    while True:
        try:
            return approximate_segment(ts, samples, degree, n_ctrl)
        except ConditioningError:
            if n_ctrl <= degree + 1:
                raise
            smaller = max(degree + 1, int(0.9 * n_ctrl))
            log.debug("spline approximation with %d control points is singular; trying %d",
                      n_ctrl, smaller)
            n_ctrl = smaller


def build_segments(frames, cfg, diag=None):
    """Group frames, approximate one spline per group and tag each frame.

    A segment spans the reference times of its first and last frame;
    events outside that span are not used. Returns
    ``(segments, frames_in_segments)``.
    """
    diag = diag if diag is not None else Diagnostics()
    diag.stage = "segmentation"
    sp = cfg.spline
    if not frames:
        raise InfeasibleCalibrationError("no reference frames", diag.as_dict())
    t_ref = np.array([f.t_ref for f in frames]) * 1e-6
    ranges = group_segments(t_ref, sp.max_gap_s, sp.min_frames())
    segments, used = [], []
    for a, b in ranges:
        fr = frames[a : b + 1]
        ts = t_ref[a : b + 1]
        samples = np.column_stack([np.array([f.t for f in fr]), rot_to_quat(np.array([f.R for f in fr]))])
        m = len(fr)
        n_ctrl = int(np.clip(round(sp.ctrl_per_frame * m), sp.degree + 1, m))
        seg = _approximate(ts, samples, sp.degree, n_ctrl)
        seg.frame_range = (len(used), len(used) + m - 1)
        for f in fr:
            f.segment = len(segments)
        segments.append(seg)
        used.extend(fr)
    diag.segments = len(segments)
    diag.segment_frames_dropped = len(frames) - len(used)
    return segments, used


def initial_correspondences(frames, segments):
    """Feature member events of every frame that fall inside its segment."""
    parts = []
    for fi, f in enumerate(frames):
        win = f.window
        inside = segments[f.segment].contains(win.events.t * 1e-6)
        for s in sorted(f.features):
            idx = np.asarray(f.features[s].member_indices, dtype=np.int64)
            idx = idx[inside[idx]]
            if idx.size == 0:
                continue
            ev = win.events
            parts.append(EventCorrespondences(
                win.start + idx, ev.t[idx] * 1e-6, ev.xy[idx].astype(float),
                np.full(idx.size, f.segment), np.full(idx.size, s), np.full(idx.size, fi),
            ))
    if not parts:
        return EventCorrespondences(np.zeros(0, np.int64), np.zeros(0), np.zeros((0, 2)),
                                    np.zeros(0, np.int64), np.zeros(0, np.int64),
                                    np.zeros(0, np.int64))
    return EventCorrespondences.concatenate(parts)


def solver_options(cfg):
    o = cfg.optimizer
    return SolverOptions(o.huber_delta, o.huber_mad_factor, o.max_iters, o.cost_tol, o.grad_tol,
                         o.step_tol, o.max_rejections, fixed_intrinsics=tuple(o.fixed_intrinsics),
                         image_size=(cfg.sensor.width, cfg.sensor.height))


def calibrate(stream, cfg=None):
    """Run the full pipeline on an event stream.

    Raises :class:`InfeasibleCalibrationError` (with per-stage diagnostics)
    when too little data survives the front-end.
    """
    cfg = (cfg or CalibrationConfig()).validate()
    spec = cfg.pattern.spec()
    diag = Diagnostics(events=len(stream))
    if len(stream) == 0:
        raise InfeasibleCalibrationError("no reference frames: empty event stream", diag.as_dict())
    frames = detect_frames(stream, cfg, diag)
    log.info("front-end: %d reference frames from %d events", len(frames), len(stream))
    k0, frames = initialize(frames, cfg, diag)
    log.info("initial intrinsics: %s (%d frames)", k0, len(frames))
    segments, frames = build_segments(frames, cfg, diag)
    diag.stage = "optimization"
    corr = initial_correspondences(frames, segments)
    diag.correspondences_initial = len(corr)
    if cfg.optimizer.augment:
        corr = augment_events(corr, frames, segments, stream, augment_dt_max_us(cfg),
                              cfg.optimizer.augment_d_max_factor)
    diag.correspondences_augmented = len(corr)
    corr.validate(segments, spec)
    frame_times = [[] for _ in segments]
    for f in frames:
        frame_times[f.segment].append(f.t_ref * 1e-6)
    result = solve(corr, segments, k0, spec, solver_options(cfg), frame_times=frame_times)
    diag.stage = "done"
    return PipelineResult(cfg, result, frames, k0, corr, diag)
