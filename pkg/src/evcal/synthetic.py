"""Ground-truth scenes and phenomenological event streams.

Events are emitted on the metric boundary of each pattern circle at the
exact camera pose of their timestamp, concentrated around the two poles
aligned with the circle's image motion: dark dots on a bright background
darken at the leading pole (negative events) and brighten at the trailing
pole (positive events).
"""

from dataclasses import dataclass, field

import numpy as np

from .camera import Intrinsics, project
from .errors import EvcalError
from .events import EventStream
from .geometry import quat_to_rot, rot_to_quat
from .pattern import PatternSpec, board_points
from .spline import KnotVector, SplineSegment, evaluate, hemisphere_align

POSE_RATE_HZ = 1000


@dataclass(frozen=True)
class NoiseConfig:
    pixel_jitter: float = 0.0
    clutter_fraction: float = 0.0
    timestamp_jitter_us: float = 0.0


@dataclass
class SyntheticScene:
    """Camera, pattern and ground-truth camera-to-world trajectory.

    Around each pole, events spread over the boundary with angular density
    ``cos(delta) ** pole_sharpness`` (``delta`` measured from the pole in the
    board plane). ``min_flow`` is the image speed (px/s) below which emission
    is thinned out proportionally.
    """

    intrinsics: Intrinsics
    pattern: PatternSpec
    trajectory: list
    width: int = 346
    height: int = 260
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    pole_sharpness: float = 2.0
    min_flow: float = 10.0
    quantize: bool = True


def default_intrinsics():
    return Intrinsics(340.0, 340.0, 173.0, 130.0, (0.35, 0.0, 0.0, 0.0, 0.0))


def look_at_pose(position, target, roll=0.0):
    """Camera-to-world rotation looking from ``position`` towards ``target``.

    Camera x roughly follows world +x, y points down the image, z forward.
    """
    z = target - position
    z = z / np.linalg.norm(z, axis=-1, keepdims=True)
    ref = np.broadcast_to(np.array([1.0, 0.0, 0.0]), z.shape)
    x = ref - np.sum(ref * z, axis=-1, keepdims=True) * z
    x = x / np.linalg.norm(x, axis=-1, keepdims=True)
    y = np.cross(z, x)
    c, s = np.cos(roll)[..., None], np.sin(roll)[..., None]
    x, y = c * x + s * y, -s * x + c * y
    return np.stack([x, y, z], axis=-1)


def analytic_trajectory(t, pattern, speed=1.0, depth=0.42):
    """Smooth hand-held style motion in front of the board.

    Returns positions ``(n, 3)`` and rotations ``(n, 3, 3)``.
    """
    t = np.asarray(t, dtype=float) * speed
    pts = board_points(pattern)
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    w = 2.0 * np.pi
    pos = np.stack(
        [
            0.16 * np.sin(w * 0.21 * t + 0.3),
            0.11 * np.sin(w * 0.29 * t + 1.9),
            -depth - 0.06 * np.sin(w * 0.17 * t + 0.7),
        ],
        axis=-1,
    ) + center
    target = np.stack(
        [
            0.055 * np.sin(w * 0.37 * t + 2.4),
            0.040 * np.sin(w * 0.43 * t + 0.2),
            np.zeros_like(t),
        ],
        axis=-1,
    ) + center
    roll = 0.25 * np.sin(w * 0.23 * t + 1.1)
    return pos, look_at_pose(pos, target, roll)


def spline_from_poses(times, positions, rotations, n_ctrl=None, degree=3):
    """Uniform clamped spline whose control points sample the given poses.

    Control points are placed at the Greville abscissae, so the curve follows
    the sampled motion closely for dense control points.
    """
    times = np.asarray(times, float)
    if n_ctrl is None:
        n_ctrl = len(times)
    knots = KnotVector.uniform(times[0], times[-1], n_ctrl, degree)
    U = knots.knots
    greville = np.array([U[i + 1 : i + degree + 1].mean() for i in range(n_ctrl)])
    px = np.column_stack([np.interp(greville, times, positions[:, k]) for k in range(3)])
    q = hemisphere_align(rot_to_quat(rotations))
    qx = np.column_stack([np.interp(greville, times, q[:, k]) for k in range(4)])
    qx /= np.linalg.norm(qx, axis=1, keepdims=True)
    return SplineSegment(knots, np.column_stack([px, qx]))


def default_scene(duration=10.0, speed=1.0, noise=None, intrinsics=None, pattern=None, **kwargs):
    """Scene with the analytic trajectory over ``[0, duration]``; extra
    keyword arguments go to :class:`SyntheticScene`."""
    pattern = pattern or PatternSpec()
    intrinsics = intrinsics or default_intrinsics()
    span = max(float(duration), 0.1)
    ts = np.linspace(0.0, span, int(round(span * 200)) + 1)
    pos, R = analytic_trajectory(ts, pattern, speed)
    traj = spline_from_poses(ts, pos, R, n_ctrl=int(round(span * 25)) + 4)
    return SyntheticScene(intrinsics, pattern, [traj], noise=noise or NoiseConfig(), **kwargs)


def trajectory_pose(trajectory, t_s):
    """Evaluate a list of segments; times outside every segment give NaN."""
    t_s = np.atleast_1d(np.asarray(t_s, float))
    pos = np.full((t_s.size, 3), np.nan)
    quat = np.full((t_s.size, 4), np.nan)
    for seg in trajectory:
        m = seg.contains(t_s)
        if m.any():
            pos[m], quat[m] = evaluate(seg, t_s[m])
    return pos, quat


def _world_to_camera(pos, quat, X):
    R = quat_to_rot(quat)
    return np.einsum("nji,nj->ni", R, X - pos)


def circle_visibility(scene, t_s, margin=0.0):
    """Projected circle centres ``(n, S, 2)`` (NaN when not projectable) and
    a mask of circles fully inside the sensor."""
    pos, quat = trajectory_pose(scene.trajectory, t_s)
    L = board_points(scene.pattern)
    n, S = len(pos), len(L)
    Xc = _world_to_camera(np.repeat(pos, S, 0), np.repeat(quat, S, 0), np.tile(L, (n, 1)))
    uv = project(scene.intrinsics, Xc, strict=False).reshape(n, S, 2)
    r_px = scene.intrinsics.fx * scene.pattern.circle_radius / np.maximum(Xc[:, 2], 1e-9).reshape(n, S)
    m = margin + r_px
    inside = (
        (uv[..., 0] >= m) & (uv[..., 0] <= scene.width - 1 - m)
        & (uv[..., 1] >= m) & (uv[..., 1] <= scene.height - 1 - m)
    )
    return uv, inside


def _pole_offsets(rng, n, sharpness):
    """Samples on (-pi/2, pi/2) with density proportional to cos^sharpness."""
    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        d = rng.uniform(-np.pi / 2, np.pi / 2, todo.size)
        acc = rng.random(todo.size) < np.cos(d) ** sharpness
        out[todo[acc]] = d[acc]
        todo = todo[~acc]
    return out


def generate(scene, event_rate, duration, seed=0):
    """Simulate an event stream and the 1 kHz ground-truth pose log.

    Event times form a Poisson process of rate ``event_rate`` (events/s);
    each event is clutter with probability ``noise.clutter_fraction`` and is
    otherwise drawn on a visible circle, thinned where image motion falls
    below ``scene.min_flow``. Returns ``(EventStream, (t_us, poses))`` with
    poses as ``(n, 7)`` rows ``tx ty tz qx qy qz qw``.
    """
    rng = np.random.default_rng(seed)
    W, H = scene.width, scene.height
    t_log = np.arange(0, int(round(duration * 1e6)) + 1, 1000000 // POSE_RATE_HZ, dtype=np.int64)
    if duration <= 0:
        return EventStream.empty(), (np.zeros(0, np.int64), np.zeros((0, 7)))
    lp, lq = trajectory_pose(scene.trajectory, t_log * 1e-6)
    if np.any(np.isnan(lp)):
        raise EvcalError("ground-truth trajectory does not cover the requested duration")
    log_poses = np.column_stack([lp, lq])

    n_events = rng.poisson(event_rate * duration)
    t_us = np.sort(np.floor(rng.uniform(0.0, duration * 1e6, n_events)).astype(np.int64))
    clutter = rng.random(n_events) < scene.noise.clutter_fraction

    # per 1 ms block: circle image velocity, local plane-to-image Jacobian
    n_blocks = int(np.ceil(duration * 1000)) + 1
    tb = (np.arange(n_blocks) + 0.5) * 1e-3
    tb = np.clip(tb, 0.0, duration)
    dt = 0.5e-3
    L = board_points(scene.pattern)
    S = len(L)
    r = scene.pattern.circle_radius
    offsets = np.array([[0, 0, 0], [r, 0, 0], [0, r, 0]], float)
    t_lo = np.clip(tb - dt, 0.0, duration)
    t_hi = np.clip(tb + dt, 0.0, duration)

    def centers_at(ts, extra):
        pos, quat = trajectory_pose(scene.trajectory, ts)
        n = len(ts)
        X = (L[None, :, None, :] + extra[None, None, :, :]).reshape(1, -1, 3)
        k = X.shape[1]
        Xc = _world_to_camera(np.repeat(pos, k, 0), np.repeat(quat, k, 0), np.tile(X[0], (n, 1)))
        uv = project(scene.intrinsics, Xc, strict=False)
        return uv.reshape(n, S, len(extra), 2), Xc[:, 2].reshape(n, S, len(extra))

    uv_mid, z_mid = centers_at(tb, offsets)
    uv_lo, _ = centers_at(t_lo, offsets[:1])
    uv_hi, _ = centers_at(t_hi, offsets[:1])
    c = uv_mid[:, :, 0]
    J = np.stack([uv_mid[:, :, 1] - c, uv_mid[:, :, 2] - c], axis=-1)  # columns: image of r*ex, r*ey
    span = np.maximum(t_hi - t_lo, 1e-9)[:, None, None]
    vel = (uv_hi[:, :, 0] - uv_lo[:, :, 0]) / span
    speed = np.linalg.norm(vel, axis=-1)
    with np.errstate(invalid="ignore"):  # circles behind the camera are NaN
        r_px = np.sqrt(np.abs(np.linalg.det(J)))
    ok = np.all(np.isfinite(c), axis=-1) & np.all(np.isfinite(J), axis=(-2, -1)) & np.isfinite(speed)
    ok &= np.all(z_mid > 0, axis=-1)
    inside = (
        (c[..., 0] >= r_px) & (c[..., 0] <= W - 1 - r_px) & (c[..., 1] >= r_px) & (c[..., 1] <= H - 1 - r_px)
    )
    visible = ok & inside
    if not visible.any():
        raise EvcalError("pattern is never in view during the requested duration")
    weight = np.where(visible, np.nan_to_num(r_px * speed), 0.0)

    sig = np.flatnonzero(~clutter)
    blk = np.minimum(t_us[sig] // 1000, n_blocks - 1)
    wsum = weight.sum(axis=1)
    cw = np.cumsum(weight, axis=1) / np.where(wsum > 0, wsum, 1.0)[:, None]
    u = rng.random(sig.size)
    circ = np.minimum((cw[blk] < u[:, None]).sum(axis=1), S - 1)
    mean_speed = wsum / np.maximum(np.where(visible, r_px, 0.0).sum(axis=1), 1e-12)
    keep_p = np.clip(mean_speed / scene.min_flow, 0.0, 1.0)
    keep = (wsum[blk] > 0) & (rng.random(sig.size) < keep_p[blk])

    # pole angle in the board plane: outward normal aligned with image motion
    Jb = J[blk, circ]
    vb = vel[blk, circ]
    lead = np.einsum("nji,nj->ni", Jb, vb)  # J^T v
    psi0 = np.arctan2(lead[:, 1], lead[:, 0])
    trailing = rng.random(sig.size) < 0.5
    delta = _pole_offsets(rng, sig.size, scene.pole_sharpness)
    psi = psi0 + np.where(trailing, np.pi, 0.0) + delta
    polarity = np.where(trailing, 1, -1)

    te = t_us[sig] * 1e-6
    pos, quat = trajectory_pose(scene.trajectory, te)
    B = L[circ] + r * np.column_stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)])
    good = keep & np.all(np.isfinite(pos), axis=1)
    Xc = _world_to_camera(pos[good], quat[good], B[good])
    uv = project(scene.intrinsics, Xc, strict=False)

    xs = np.empty(n_events)
    ys = np.empty(n_events)
    ps = np.empty(n_events, dtype=np.int8)
    valid = np.zeros(n_events, dtype=bool)
    sig_good = sig[good]
    xs[sig_good], ys[sig_good] = uv[:, 0], uv[:, 1]
    ps[sig_good] = polarity[good]
    valid[sig_good] = np.all(np.isfinite(uv), axis=1)

    cl = np.flatnonzero(clutter)
    xs[cl] = rng.uniform(0, W - 1, cl.size)
    ys[cl] = rng.uniform(0, H - 1, cl.size)
    ps[cl] = np.where(rng.random(cl.size) < 0.5, 1, -1)
    valid[cl] = True

    if scene.noise.pixel_jitter > 0:
        xs[sig_good] += rng.normal(0.0, scene.noise.pixel_jitter, sig_good.size)
        ys[sig_good] += rng.normal(0.0, scene.noise.pixel_jitter, sig_good.size)
    if scene.quantize:
        xs = np.round(xs)
        ys = np.round(ys)
        valid &= (xs >= 0) & (xs <= W - 1) & (ys >= 0) & (ys <= H - 1)
    else:
        valid &= (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
    t_out = t_us.copy()
    if scene.noise.timestamp_jitter_us > 0:
        t_out = t_out + np.round(rng.normal(0.0, scene.noise.timestamp_jitter_us, n_events)).astype(np.int64)
        t_out = np.maximum(t_out, 0)
    idx = np.flatnonzero(valid)
    idx = idx[np.argsort(t_out[idx], kind="stable")]
    stream = EventStream(t_out[idx], xs[idx], ys[idx], ps[idx])
    return stream, (t_log, log_poses)
