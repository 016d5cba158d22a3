"""Small synthetic problems built from package primitives."""

import numpy as np

from evcal.camera import Intrinsics, project
from evcal.geometry import quat_to_rot
from evcal.optimizer import EventCorrespondences
from evcal.pattern import PatternSpec, board_points
from evcal.spline import evaluate
from evcal.synthetic import analytic_trajectory, spline_from_poses

TRUE_K = Intrinsics(340.0, 338.0, 173.0, 130.0, (0.3, 0.05, 0.01, -0.01, 0.002))


def backend_problem(rng, n_events=200, t0=1.0, t1=1.6, n_ctrl=8, spec=None, k=TRUE_K):
    """One spline segment, exact event pixels on the circle boundaries and
    the generating intrinsics. Returns ``(corr, [segment], k, spec)``."""
    spec = spec or PatternSpec()
    ts = np.linspace(t0, t1, 121)
    pos, R = analytic_trajectory(ts, spec)
    seg = spline_from_poses(ts, pos, R, n_ctrl=n_ctrl)
    L = board_points(spec)
    times = np.sort(rng.uniform(t0, t1, 4 * n_events))
    circ = rng.integers(0, spec.size, times.size)
    ang = rng.uniform(0, 2 * np.pi, times.size)
    X = L[circ] + spec.circle_radius * np.column_stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)])
    p, q = evaluate(seg, times)
    Rw = quat_to_rot(q)
    Xc = np.einsum("nji,nj->ni", Rw, X - p)  # R^T (X - t)
    uv = project(k, Xc, strict=False)
    ok = np.all(np.isfinite(uv), axis=1)
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < 346) & (uv[:, 1] >= 0) & (uv[:, 1] < 260)
    idx = np.flatnonzero(ok)[:n_events]
    corr = EventCorrespondences(
        np.arange(idx.size), times[idx], uv[idx], np.zeros(idx.size, int), circ[idx],
        np.zeros(idx.size, int),
    )
    return corr, [seg], k, spec
