"""Result files: YAML text with intrinsics, splines, statistics and a config echo.

Floats are written with their shortest round-trip representation and keys
in a fixed order, so identical runs give byte-identical files.
"""

import numpy as np
import yaml

from . import __version__
from .camera import Intrinsics
from .spline import KnotVector, SplineSegment

FORMAT_VERSION = 1
HIST_BINS = 50


def _f(x):
    return float(x)


def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def _intrinsics(k):
    return {"fx": _f(k.fx), "fy": _f(k.fy), "cx": _f(k.cx), "cy": _f(k.cy),
            "dist": _floats(k.dist)}


def _stats(s):
    return {"count": int(s.count), "rms_m": _f(s.rms), "robust_cost": _f(s.robust_cost),
            "excluded": int(s.excluded)}


def _histogram(r, bins=HIST_BINS):
    r = np.asarray(r, dtype=float)
    if r.size == 0:
        return {"edges_m": [], "counts": []}
    lim = float(np.percentile(np.abs(r), 99.0)) or 1e-9
    counts, edges = np.histogram(np.clip(r, -lim, lim), bins=bins, range=(-lim, lim))
    return {"edges_m": _floats(edges), "counts": [int(c) for c in counts]}


def _feature_list(feats):
    out = []
    for s in sorted(feats):
        f = feats[s]
        out.append({"circle": int(s), "center": _floats(f.center), "radius": _f(f.radius)})
    return out


def result_to_dict(pipeline_result):
    """Plain-data view of a :class:`~evcal.pipeline.PipelineResult`."""
    pr = pipeline_result
    res = pr.result
    segs = []
    for seg in res.segments:
        segs.append({
            "degree": int(seg.degree),
            "frame_range": [int(v) for v in seg.frame_range] if seg.frame_range else None,
            "knots": _floats(seg.knots.knots),
            "control_points": [_floats(p) for p in seg.control_points],
        })
    frames = []
    for f in pr.frames:
        frames.append({
            "t_ref_us": _f(f.t_ref),
            "event_range": [int(f.window.start), int(f.window.stop)],
            "segment": int(f.segment),
            "detected": _feature_list(f.detection.correspondences),
            "rectified": _feature_list(f.features),
        })
    valid = res.residuals[np.isfinite(res.residuals)]
    return {
        "format_version": FORMAT_VERSION,
        "tool": {"name": "evcal", "version": __version__},
        "converged": bool(res.converged),
        "termination": res.termination,
        "iterations": int(res.iterations),
        "intrinsics": _intrinsics(res.intrinsics),
        "initial_intrinsics": _intrinsics(pr.initial_intrinsics),
        "solver": {
            "huber_delta_m": _f(res.huber_delta),
            "initial": _stats(res.initial_stats),
            "final": _stats(res.stats),
            "cost_history": _floats(res.cost_history),
            "residual_histogram": _histogram(valid),
        },
        "correspondences": {
            "initial": int(pr.diagnostics.correspondences_initial),
            "augmented": int(pr.diagnostics.correspondences_augmented),
        },
        "diagnostics": {k: (v if isinstance(v, str) else int(v))
                        for k, v in pr.diagnostics.as_dict().items()},
        "segments": segs,
        "frames": frames,
        "config": pr.config.to_dict(),
    }


def dump_result(pipeline_result):
    return yaml.safe_dump(result_to_dict(pipeline_result), sort_keys=False,
                          default_flow_style=None, width=100)


def write_result(path, pipeline_result):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_result(pipeline_result))


def read_result(path):
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict) or "intrinsics" not in data:
        raise ValueError(f"{path}: not a calibration result file")
    return data


def intrinsics_from(data):
    k = data["intrinsics"]
    return Intrinsics(k["fx"], k["fy"], k["cx"], k["cy"], tuple(k["dist"]))


def segments_from(data):
    out = []
    for s in data["segments"]:
        knots = KnotVector(s["degree"], np.array(s["knots"], dtype=float))
        fr = tuple(s["frame_range"]) if s.get("frame_range") else None
        out.append(SplineSegment(knots, np.array(s["control_points"], dtype=float), fr))
    return out


def pose_samples(pipeline_result):
    """Refined poses at the reference timestamps: ``(t_us, poses (n, 7))``."""
    res = pipeline_result.result
    t = np.array([f.t_ref for f in pipeline_result.frames], dtype=float)
    pos, quat = res.poses_at(t * 1e-6)
    keep = np.all(np.isfinite(pos), axis=1)
    return t[keep], np.column_stack([pos, quat])[keep]
