"""Continuous-time back-end: events against pattern circles.

Every event ``e_i`` is lifted to the normalized image plane, rotated into
the pattern frame with the spline pose of its segment at its own timestamp
and intersected with the plane ``z = 0``::

    n = normalize(k, m_i)                    # (nx, ny, 1), not unit length
    d = R(t_i) n
    lam = -t_z(t_i) / d_z
    x_i = t(t_i) + lam d                     # x_i[2] == 0
    r_i = |x_i[:2] - l_s| - circle_radius

The robust objective ``sum rho(r_i^2)`` with the Huber function
``rho(s) = s`` for ``s <= delta^2`` and ``2 delta sqrt(s) - delta^2`` above
is minimized over all control points and the intrinsics by
Levenberg-Marquardt on iteratively reweighted normal equations.

State layout: the control points of all segments (7 values each, segment
after segment) followed by the 9 intrinsics. Each residual touches 4
consecutive control points and the intrinsics, which gives the normal
matrix a block-banded shape with a dense border; it is factorized by a
sparse LU without reordering.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .camera import N_PARAMS, Intrinsics, InverseRadialCamera
from .errors import DomainError, EvcalError
from .geometry import quat_to_rot, rotate_gradient_quat
from .pattern import board_points
from .spline import SplineSegment, basis_funs, evaluate, find_span

log = logging.getLogger(__name__)

POSE_DIM = 7
DEGENERATE_DZ = 1e-12


# --------------------------------------------------------------------------
# correspondences


@dataclass
class EventCorrespondences:
    """Columnar event-to-circle assignments.

    ``times`` are seconds, ``pixels`` ``(N, 2)``, ``segment`` the spline
    segment, ``circle`` the pattern circle index, ``frame`` the reference
    frame the assignment came from and ``augmented`` marks events added by
    :func:`augment_events`.
    """

    event_index: np.ndarray
    times: np.ndarray
    pixels: np.ndarray
    segment: np.ndarray
    circle: np.ndarray
    frame: np.ndarray
    augmented: np.ndarray = None

    def __post_init__(self):
        n = len(self.event_index)
        if self.augmented is None:
            self.augmented = np.zeros(n, dtype=bool)
        for name in ("times", "segment", "circle", "frame", "augmented"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has the wrong length")
        if self.pixels.shape != (n, 2):
            raise ValueError("pixels must have shape (N, 2)")

    def __len__(self):
        return len(self.event_index)

    def __getitem__(self, item):
        return EventCorrespondence(
            int(self.event_index[item]), int(self.segment[item]), int(self.circle[item]),
            None,
        )

    def subset(self, mask):
        return EventCorrespondences(
            self.event_index[mask], self.times[mask], self.pixels[mask], self.segment[mask],
            self.circle[mask], self.frame[mask], self.augmented[mask],
        )

    @classmethod
    def concatenate(cls, parts):
        cols = {}
        for name in ("event_index", "times", "pixels", "segment", "circle", "frame", "augmented"):
            cols[name] = np.concatenate([getattr(p, name) for p in parts])
        return cls(**cols)

    def validate(self, segments, spec):
        for s, seg in enumerate(segments):
            m = self.segment == s
            if np.any(~seg.contains(self.times[m])):
                raise ValueError(f"event timestamps outside segment {s}")
        if np.any((self.circle < 0) | (self.circle >= spec.size)):
            raise ValueError("circle index out of range")
        return self


class EventCorrespondence(NamedTuple):
    """Single assignment, mostly for inspection; ``center`` is the board
    circle centre (z = 0) when filled in."""

    event: int
    segment: int
    circle: int
    center: np.ndarray


# --------------------------------------------------------------------------
# geometry of one event


def event_depth(R, t, n):
    """Ray depth ``lam = -t_z / (R n)_z`` for camera-to-world ``(R, t)``.

    Broadcasts over leading axes; raises :class:`DomainError` when a ray is
    parallel to the pattern plane.
    """
    d = np.einsum("...ij,...j->...i", np.asarray(R, float), np.asarray(n, float))
    dz = d[..., 2]
    if np.any(np.abs(dz) < DEGENERATE_DZ):
        raise DomainError("event ray is parallel to the pattern plane")
    return -np.asarray(t, float)[..., 2] / dz


def plane_point(R, t, n):
    """Intersection ``x = t + lam R n`` of the event ray with ``z = 0``."""
    lam = event_depth(R, t, n)
    d = np.einsum("...ij,...j->...i", np.asarray(R, float), np.asarray(n, float))
    return np.asarray(t, float) + lam[..., None] * d


def event_residual(R, t, n, center, radius):
    """Signed distance of the plane point to the circle of ``radius``."""
    x = plane_point(R, t, n)
    return np.linalg.norm(x[..., :2] - np.asarray(center, float)[..., :2], axis=-1) - radius


# --------------------------------------------------------------------------
# robust loss


def huber(s, delta):
    """Huber function of the squared residual ``s`` and its derivative."""
    s = np.asarray(s, float)
    d2 = delta * delta
    small = s <= d2
    root = np.sqrt(np.maximum(s, d2))
    rho = np.where(small, s, 2.0 * delta * root - d2)
    drho = np.where(small, 1.0, delta / root)
    return rho, drho


def mad_scale(r):
    """Median absolute deviation scaled to a Gaussian sigma."""
    r = np.asarray(r, float)
    return 1.4826 * float(np.median(np.abs(r - np.median(r))))


# --------------------------------------------------------------------------
# state


class _Layout:
    def __init__(self, segments):
        self.n_ctrl = [seg.control_points.shape[0] for seg in segments]
        self.offsets = np.concatenate([[0], np.cumsum(self.n_ctrl)]) * POSE_DIM
        self.n_pose = int(self.offsets[-1])
        self.k_slice = slice(self.n_pose, self.n_pose + N_PARAMS)
        self.size = self.n_pose + N_PARAMS

    def pack(self, segments, k):
        return np.concatenate([seg.control_points.ravel() for seg in segments] + [np.asarray(k, float)])

    def unpack(self, x, segments):
        out = []
        for s, seg in enumerate(segments):
            P = x[self.offsets[s] : self.offsets[s + 1]].reshape(-1, POSE_DIM)
            out.append(SplineSegment(seg.knots, P.copy(), seg.frame_range))
        return out, x[self.k_slice].copy()


class _Evaluation(NamedTuple):
    r: np.ndarray
    valid: np.ndarray
    rows: np.ndarray = None  # (N, 28 + 9) Jacobian rows, if requested
    first_col: np.ndarray = None  # state column of the first touched control value


def _evaluate(x, layout, segments, corr, camera, spec, spans, basis, jacobian):
    """Residuals (and Jacobian rows) of all correspondences at state ``x``."""
    p = segments[0].degree
    L = board_points(spec)[:, :2]
    k = x[layout.k_slice]
    N = len(corr)
    ctrl_index = np.empty((N, p + 1), dtype=np.int64)
    for s, seg in enumerate(segments):
        m = corr.segment == s
        base = layout.offsets[s] // POSE_DIM
        ctrl_index[m] = base + spans[m, None] - p + np.arange(p + 1)
    P = x[: layout.n_pose].reshape(-1, POSE_DIM)
    v = np.einsum("nj,njd->nd", basis, P[ctrl_index])
    t = v[:, :3]
    qt = v[:, 3:]
    qn = np.linalg.norm(qt, axis=1)
    valid = qn > 1e-9
    q = qt / np.where(valid, qn, 1.0)[:, None]
    R = quat_to_rot(q)
    if jacobian:
        n, dn_dk, _ = camera.normalize_jacobian(k, corr.pixels)
    else:
        n = camera.normalize(k, corr.pixels)
    d = np.einsum("nij,nj->ni", R, n)
    dz = d[:, 2]
    valid &= np.abs(dz) >= DEGENERATE_DZ
    dz_safe = np.where(valid, dz, 1.0)
    lam = -t[:, 2] / dz_safe
    g = t[:, :2] + lam[:, None] * d[:, :2] - L[corr.circle]
    dist = np.linalg.norm(g, axis=1)
    r = dist - spec.circle_radius
    valid &= np.isfinite(r)
    r = np.where(valid, r, 0.0)
    if not jacobian:
        return _Evaluation(r, valid)

    u = g / np.where(dist > 0, dist, 1.0)[:, None]
    u[dist == 0] = 0.0
    # dx_xy/dt = A, dx_xy/dd = lam A with A = [I2 | -d_xy / d_z]
    uA = np.column_stack([u, -np.einsum("ni,ni->n", u, d[:, :2]) / dz_safe])
    dr_dt = uA
    dr_dd = lam[:, None] * uA
    dr_dq = rotate_gradient_quat(q, n, dr_dd)
    # unit-norm projection of the raw quaternion block
    dr_dqt = (dr_dq - np.einsum("ni,ni->n", dr_dq, q)[:, None] * q) / np.where(valid, qn, 1.0)[:, None]
    dr_dv = np.column_stack([dr_dt, dr_dqt])
    dr_dn = np.einsum("ni,nij->nj", dr_dd, R[:, :, :2])
    dr_dk = np.einsum("ni,nij->nj", dr_dn, dn_dk)
    rows = np.empty((N, (p + 1) * POSE_DIM + N_PARAMS))
    rows[:, : (p + 1) * POSE_DIM] = (basis[:, :, None] * dr_dv[:, None, :]).reshape(N, -1)
    rows[:, (p + 1) * POSE_DIM :] = dr_dk
    rows[~valid] = 0.0
    return _Evaluation(r, valid, rows, ctrl_index[:, 0] * POSE_DIM)


def _spans_and_basis(segments, corr):
    p = segments[0].degree
    spans = np.empty(len(corr), dtype=np.int64)
    basis = np.empty((len(corr), p + 1))
    for s, seg in enumerate(segments):
        m = corr.segment == s
        if m.any():
            spans[m] = find_span(corr.times[m], seg.knots)
            basis[m] = basis_funs(spans[m], corr.times[m], seg.knots)
    return spans, basis


def _normal_equations(ev, w, layout, n_band):
    """Sparse ``J^T W J`` and ``J^T W r`` from per-event Jacobian rows."""
    nk = N_PARAMS
    wr = w * ev.r
    g = np.zeros(layout.size)
    rows = ev.rows
    # gradient
    cols = ev.first_col[:, None] + np.arange(n_band)
    np.add.at(g, cols.ravel(), (rows[:, :n_band] * wr[:, None]).ravel())
    g[layout.k_slice] += rows[:, n_band:].T @ wr
    # Hessian blocks grouped by first column (events sharing their span)
    order = np.argsort(ev.first_col, kind="stable")
    fc = ev.first_col[order]
    bounds = np.flatnonzero(np.diff(fc)) + 1
    starts = np.concatenate([[0], bounds])
    stops = np.concatenate([bounds, [len(fc)]])
    I, Jc, V = [], [], []
    kcols = np.arange(layout.k_slice.start, layout.k_slice.stop)
    Hkk = np.zeros((nk, nk))
    for a, b in zip(starts, stops):
        sel = order[a:b]
        Jr = rows[sel]
        H = Jr.T @ (w[sel, None] * Jr)
        c0 = fc[a]
        band = np.arange(c0, c0 + n_band)
        allc = np.concatenate([band, kcols])
        # pose-pose and pose-intrinsic blocks; intrinsic-intrinsic summed densely
        blk = H[:n_band, :]
        I.append(np.repeat(band, n_band + nk))
        Jc.append(np.tile(allc, n_band))
        V.append(blk.ravel())
        I.append(np.repeat(kcols, n_band))
        Jc.append(np.tile(band, nk))
        V.append(H[n_band:, :n_band].ravel())
        Hkk += H[n_band:, n_band:]
    I.append(np.repeat(kcols, nk))
    Jc.append(np.tile(kcols, nk))
    V.append(Hkk.ravel())
    Hs = sp.coo_matrix(
        (np.concatenate(V), (np.concatenate(I), np.concatenate(Jc))), shape=(layout.size,) * 2
    ).tocsc()
    Hs.sum_duplicates()
    return Hs, g


# --------------------------------------------------------------------------
# solver


@dataclass
class SolverOptions:
    huber_delta: float = None  # meters; None -> huber_mad_factor * MAD of initial residuals
    huber_mad_factor: float = 1.345
    max_iters: int = 50
    cost_tol: float = 1e-6
    grad_tol: float = 1e-12
    step_tol: float = 1e-10
    max_rejections: int = 10
    initial_damping: float = 1e-4
    fixed_intrinsics: tuple = ()  # indices into [fx, fy, cx, cy, k1..k5] held constant
    image_size: tuple = None  # (width, height); steps to a non-invertible camera are rejected


@dataclass
class ResidualStats:
    count: int
    rms: float
    robust_cost: float
    excluded: int


@dataclass(eq=False)
class CalibrationResult:
    intrinsics: Intrinsics
    segments: list
    stats: ResidualStats
    initial_stats: ResidualStats
    huber_delta: float
    iterations: int
    converged: bool
    termination: str
    cost_history: list = field(default_factory=list)
    residuals: np.ndarray = field(default=None, repr=False)
    pose_samples: list = field(default_factory=list)  # (t_s, position, quaternion)

    def poses_at(self, times):
        """Evaluate the trajectory; times outside every segment give NaN."""
        times = np.atleast_1d(np.asarray(times, float))
        pos = np.full((times.size, 3), np.nan)
        quat = np.full((times.size, 4), np.nan)
        for seg in self.segments:
            m = seg.contains(times)
            if m.any():
                pos[m], quat[m] = evaluate(seg, times[m])
        return pos, quat


def _stats(ev, delta):
    r = ev.r[ev.valid]
    rho, _ = huber(r * r, delta)
    return ResidualStats(int(r.size), float(np.sqrt(np.mean(r * r))) if r.size else float("nan"),
                         float(rho.sum()), int((~ev.valid).sum()))


def solve(corr, segments, intrinsics, spec, options=None, camera=InverseRadialCamera,
          frame_times=None):
    """Jointly refine control points and intrinsics.

    ``frame_times`` (seconds, per segment lists) selects the pose samples
    stored in the result. Raises :class:`EvcalError` for an unusable
    initial state.
    """
    opts = options or SolverOptions()
    segments = [seg.copy() for seg in segments]
    p = segments[0].degree
    for s, seg in enumerate(segments):
        if seg.control_points.shape[0] < p + 1:
            raise EvcalError(f"segment {s} has fewer than {p + 1} control points")
        if not np.any(corr.segment == s):
            raise EvcalError(f"segment {s} has no correspondences")
    layout = _Layout(segments)
    k0 = intrinsics.as_array() if isinstance(intrinsics, Intrinsics) else np.asarray(intrinsics, float)
    x = layout.pack(segments, k0)
    spans, basis = _spans_and_basis(segments, corr)
    n_band = (p + 1) * POSE_DIM

    def evaluate_at(xx, jac):
        return _evaluate(xx, layout, segments, corr, camera, spec, spans, basis, jac)

    ev = evaluate_at(x, True)
    if not np.all(np.isfinite(ev.r)) or not ev.valid.any():
        raise EvcalError("initial state gives no finite residuals")
    delta = opts.huber_delta
    if delta is None:
        delta = opts.huber_mad_factor * mad_scale(ev.r[ev.valid])
        if not delta > 0:
            delta = opts.huber_mad_factor * max(float(np.sqrt(np.mean(ev.r[ev.valid] ** 2))), 1e-12)
    initial = _stats(ev, delta)
    cost = initial.robust_cost
    history = [cost]
    fixed = np.zeros(layout.size, dtype=bool)
    for i in opts.fixed_intrinsics:
        fixed[layout.k_slice.start + int(i)] = True

    mu = opts.initial_damping
    nu = 2.0
    rejections = 0
    converged = False
    termination = "max_iters"
    it = 0
    for it in range(1, opts.max_iters + 1):
        _, w = huber(ev.r * ev.r, delta)
        w = np.where(ev.valid, w, 0.0)
        H, g = _normal_equations(ev, w, layout, n_band)
        g[fixed] = 0.0
        if np.max(np.abs(g)) <= opts.grad_tol * max(1.0, cost):
            converged, termination = True, "gradient"
            break
        diag = H.diagonal().copy()
        diag[diag <= 0] = 1.0
        accepted = False
        while rejections < opts.max_rejections:
            A = (H + sp.diags(mu * diag)).tocsc()
            if fixed.any():
                A = A.tolil()
                for j in np.flatnonzero(fixed):
                    A[j, :] = 0.0
                    A[:, j] = 0.0
                    A[j, j] = 1.0
                A = A.tocsc()
            try:
                step = -splu(A, permc_spec="NATURAL").solve(g)
            except RuntimeError:
                step = np.full(layout.size, np.nan)
            if not np.all(np.isfinite(step)):
                mu *= nu
                nu *= 2.0
                rejections += 1
                continue
            x_new = x + step
            if opts.image_size and hasattr(camera, "is_valid") and not camera.is_valid(
                    x_new[layout.k_slice], *opts.image_size):
                mu *= nu
                nu *= 2.0
                rejections += 1
                continue
            ev_new = evaluate_at(x_new, False)
            new_cost = _stats(ev_new, delta).robust_cost
            predicted = -(step @ g) - 0.5 * step @ (H @ step)
            if np.isfinite(new_cost) and new_cost < cost:
                rho_ratio = (cost - new_cost) / max(predicted, 1e-300)
                mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho_ratio - 1.0) ** 3)
                nu = 2.0
                accepted = True
                rejections = 0
                break
            mu *= nu
            nu *= 2.0
            rejections += 1
        if not accepted:
            termination = "rejections"
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        small_step = np.linalg.norm(step) <= opts.step_tol * (np.linalg.norm(x) + opts.step_tol)
        x, cost = x_new, new_cost
        history.append(cost)
        ev = evaluate_at(x, True)
        log.debug("LM iteration %d: cost %.6g, mu %.3g", it, cost, mu)
        if rel <= opts.cost_tol:
            converged, termination = True, "cost"
            break
        if small_step:
            converged, termination = True, "step"
            break

    segs, k = layout.unpack(x, segments)
    final = _stats(ev, delta)
    result = CalibrationResult(
        Intrinsics.from_array(k), segs, final, initial, float(delta), it, converged,
        termination, history, ev.r.copy(),
    )
    if frame_times is not None:
        for s, ts in enumerate(frame_times):
            ts = np.asarray(ts, float)
            if ts.size:
                pos, quat = evaluate(segs[s], ts)
                result.pose_samples.extend(zip(ts, pos, quat))
    log.info("back-end: %d iterations (%s), rms %.4g m -> %.4g m", it, termination,
             initial.rms, final.rms)
    return result


def residuals(corr, segments, intrinsics, spec, camera=InverseRadialCamera, jacobian=False):
    """Residuals (and dense Jacobian) at a given state; for tests and
    diagnostics. The Jacobian columns follow the solver's state layout."""
    layout = _Layout(segments)
    k0 = intrinsics.as_array() if isinstance(intrinsics, Intrinsics) else np.asarray(intrinsics, float)
    x = layout.pack(segments, k0)
    spans, basis = _spans_and_basis(segments, corr)
    ev = _evaluate(x, layout, segments, corr, camera, spec, spans, basis, jacobian)
    if not jacobian:
        return ev.r, ev.valid
    p = segments[0].degree
    n_band = (p + 1) * POSE_DIM
    J = np.zeros((len(corr), layout.size))
    cols = ev.first_col[:, None] + np.arange(n_band)
    np.put_along_axis(J, cols, ev.rows[:, :n_band], axis=1)
    J[:, layout.k_slice] = ev.rows[:, n_band:]
    return ev.r, ev.valid, J


# --------------------------------------------------------------------------
# augmentation


def augment_events(corr, frames, segments, stream, dt_max_us, d_max_factor=1.5, d_max_px=None):
    """Add unassigned events near a frame in time and near one of its circles.

    ``frames`` are the accepted reference frames with ``features`` dicts and
    a ``segment`` attribute. An event is a candidate for the frame with the
    nearest reference time when ``|t - t_ref| <= dt_max_us``; within that
    frame it joins the circle whose perimeter is nearest, provided the
    pixel distance to the perimeter is at most ``d_max_factor`` times the
    circle radius (or ``d_max_px`` when given). Ties go to the lower circle
    index. Returns the enlarged correspondences (originals first).
    """
    if not frames or (dt_max_us <= 0 and not len(corr)):
        return corr
    t_ref = np.array([f.t_ref for f in frames], dtype=float)
    t = stream.t
    xy = stream.xy
    taken = np.zeros(len(stream), dtype=bool)
    taken[corr.event_index] = True
    parts = [corr]
    # candidate events per frame: those whose nearest reference time is this frame
    lo = np.searchsorted(t, t_ref.min() - dt_max_us, side="left")
    hi = np.searchsorted(t, t_ref.max() + dt_max_us, side="right")
    idx = np.arange(lo, hi)
    idx = idx[~taken[idx]]
    if idx.size == 0:
        return corr
    tt = t[idx].astype(float)
    pos = np.clip(np.searchsorted(t_ref, tt), 1, len(t_ref) - 1) if len(t_ref) > 1 else np.zeros(idx.size, int)
    if len(t_ref) > 1:
        left = pos - 1
        nearest = np.where(np.abs(tt - t_ref[left]) <= np.abs(tt - t_ref[pos]), left, pos)
    else:
        nearest = pos
    near_ok = np.abs(tt - t_ref[nearest]) <= dt_max_us
    for fi, f in enumerate(frames):
        sel = idx[(nearest == fi) & near_ok]
        if sel.size == 0 or not f.features:
            continue
        seg = segments[f.segment]
        ts = t[sel] * 1e-6
        sel = sel[seg.contains(ts)]
        if sel.size == 0:
            continue
        circ = np.array(sorted(f.features))
        C = np.array([f.features[s].center for s in circ])
        rad = np.array([f.features[s].radius for s in circ])
        dmax = rad * d_max_factor if d_max_px is None else np.full(rad.size, float(d_max_px))
        dp = np.abs(np.linalg.norm(xy[sel, None, :] - C[None], axis=2) - rad[None])
        best = np.argmin(dp, axis=1)  # first minimum -> lowest circle index
        ok = dp[np.arange(sel.size), best] <= dmax[best]
        if not ok.any():
            continue
        ev_idx = sel[ok]
        parts.append(EventCorrespondences(
            ev_idx, t[ev_idx] * 1e-6, xy[ev_idx].astype(float),
            np.full(ev_idx.size, f.segment), circ[best[ok]], np.full(ev_idx.size, fi),
            np.ones(ev_idx.size, dtype=bool),
        ))
    return EventCorrespondences.concatenate(parts)
