"""Clamped non-uniform B-splines over 7-D poses (position + quaternion).

Spline time is in seconds. Control points are raw 7-vectors
``(tx, ty, tz, qx, qy, qz, qw)``; the quaternion block of an evaluated
curve is normalized afterwards, so the optimizer can move control points
freely without a manifold constraint.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConditioningError, DomainError, InfeasibleCalibrationError

DEGREE = 3


@dataclass(frozen=True)
class KnotVector:
    degree: int
    knots: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.knots, dtype=float)
        p = int(self.degree)
        object.__setattr__(self, "knots", u)
        object.__setattr__(self, "degree", p)
        if p < 1:
            raise ValueError("degree must be at least 1")
        if u.ndim != 1 or u.size < 2 * (p + 1):
            raise ValueError("knot vector too short for its degree")
        if np.any(np.diff(u) < 0):
            raise ValueError("knots must be non-decreasing")
        if not (np.all(u[: p + 1] == u[0]) and np.all(u[-p - 1 :] == u[-1])):
            raise ValueError("knot vector must be clamped")
        if not u[-1] > u[0]:
            raise ValueError("knot vector has an empty domain")
        inner = u[p + 1 : -p - 1]
        if inner.size and (inner.min() <= u[0] or inner.max() >= u[-1]):
            raise ValueError("interior knots must lie strictly inside the domain")

    @classmethod
    def clamped(cls, t_first, t_last, interior=(), degree=DEGREE):
        p = degree
        u = np.concatenate([np.full(p + 1, t_first), np.asarray(interior, float), np.full(p + 1, t_last)])
        return cls(p, u)

    @classmethod
    def uniform(cls, t_first, t_last, n_ctrl, degree=DEGREE):
        n_inner = n_ctrl - degree - 1
        if n_inner < 0:
            raise ValueError("need at least degree + 1 control points")
        inner = np.linspace(t_first, t_last, n_inner + 2)[1:-1]
        return cls.clamped(t_first, t_last, inner, degree)

    @property
    def n_ctrl(self):
        return self.knots.size - self.degree - 1

    @property
    def t_first(self):
        return float(self.knots[0])

    @property
    def t_last(self):
        return float(self.knots[-1])


@dataclass
class SplineSegment:
    """One continuous trajectory fragment.

    ``frame_range`` is the inclusive index range ``(a, b)`` of the reference
    frames this segment was initialized from, when known.
    """

    knots: KnotVector
    control_points: np.ndarray
    frame_range: tuple = None

    def __post_init__(self):
        cp = np.array(self.control_points, dtype=float)
        if cp.ndim != 2 or cp.shape[1] != 7:
            raise ValueError("control points must have shape (n, 7)")
        if cp.shape[0] != self.knots.n_ctrl:
            raise ValueError(
                f"{cp.shape[0]} control points do not match {self.knots.n_ctrl} implied by the knots"
            )
        self.control_points = cp

    @property
    def degree(self):
        return self.knots.degree

    @property
    def t_first(self):
        return self.knots.t_first

    @property
    def t_last(self):
        return self.knots.t_last

    def contains(self, u):
        u = np.asarray(u, dtype=float)
        return (u >= self.t_first) & (u <= self.t_last)

    def copy(self):
        return SplineSegment(self.knots, self.control_points.copy(), self.frame_range)


def find_span(u, knots):
    """Knot span index ``k`` with ``u`` in ``[u_k, u_{k+1})``.

    The right end of the domain maps to the last non-empty span. Accepts a
    scalar or an array of parameters.
    """
    U = knots.knots
    p = knots.degree
    n = U.size - p - 2
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < U[0]) or np.any(u_arr > U[-1]) or np.any(np.isnan(u_arr)):
        raise DomainError(f"parameter outside the spline domain [{U[0]}, {U[-1]}]")
    k = np.searchsorted(U, u_arr, side="right") - 1
    k = np.clip(k, p, n)
    return int(k) if np.ndim(u) == 0 else k


def basis_funs(span, u, knots):
    """Non-zero basis values ``N_{span-p..span, p}(u)`` by the Cox-de Boor
    triangle. Vectorized: arrays of spans/parameters give shape ``(N, p+1)``."""
    U = knots.knots
    p = knots.degree
    scalar = np.ndim(u) == 0
    i = np.atleast_1d(np.asarray(span))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    N = np.zeros((u.size, p + 1))
    N[:, 0] = 1.0
    left = np.zeros((u.size, p + 1))
    right = np.zeros((u.size, p + 1))
    for j in range(1, p + 1):
        left[:, j] = u - U[i + 1 - j]
        right[:, j] = U[i + j] - u
        saved = np.zeros(u.size)
        for r in range(j):
            temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    # exact interpolation at the clamped ends (the triangle can be 1 ulp off)
    N[u == U[0]] = np.eye(p + 1)[0]
    N[u == U[-1]] = np.eye(p + 1)[p]
    return N[0] if scalar else N


def basis_matrix(u, knots):
    """Dense ``(len(u), n_ctrl)`` collocation matrix."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    span = find_span(u, knots)
    N = basis_funs(span, u, knots)
    B = np.zeros((u.size, knots.n_ctrl))
    cols = span[:, None] - knots.degree + np.arange(knots.degree + 1)
    np.put_along_axis(B, cols, N, axis=1)
    return B


def evaluate_raw(seg, u):
    """Spans, basis values and the un-normalized 7-D curve value at ``u``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    span = find_span(u, seg.knots)
    N = basis_funs(span, u, seg.knots)
    p = seg.degree
    idx = span[:, None] - p + np.arange(p + 1)
    value = np.einsum("nj,njd->nd", N, seg.control_points[idx])
    return span, N, value


def evaluate(seg, u):
    """Position(s) and unit quaternion(s) of ``seg`` at time(s) ``u``."""
    scalar = np.ndim(u) == 0
    _, _, value = evaluate_raw(seg, u)
    norm = np.linalg.norm(value[:, 3:], axis=1)
    if np.any(norm < 1e-9):
        raise DomainError("quaternion block of the spline evaluates to ~zero norm")
    pos = value[:, :3]
    quat = value[:, 3:] / norm[:, None]
    if scalar:
        return pos[0], quat[0]
    return pos, quat


def hemisphere_align(quaternions):
    """Flip signs so consecutive quaternions have non-negative dot products."""
    q = np.array(quaternions, dtype=float, copy=True)
    for i in range(1, len(q)):
        if np.dot(q[i], q[i - 1]) < 0:
            q[i] = -q[i]
    return q


def group_segments(times, max_gap, min_frames=DEGREE + 2):
    """Split time-ordered frame timestamps into runs with gaps <= ``max_gap``.

    Returns inclusive index ranges ``(a, b)``; runs shorter than
    ``min_frames`` are dropped. Raises :class:`InfeasibleCalibrationError`
    when nothing survives.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise InfeasibleCalibrationError("no reference frames to group into segments")
    if np.any(np.diff(times) < 0):
        raise ValueError("frame timestamps must be time-ordered")
    breaks = np.flatnonzero(np.diff(times) > max_gap)
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [times.size - 1]])
    ranges = [(int(a), int(b)) for a, b in zip(starts, ends) if b - a + 1 >= min_frames]
    if not ranges:
        raise InfeasibleCalibrationError(
            f"no segment with at least {min_frames} frames (gap threshold {max_gap} s)",
            {"frames": int(times.size), "runs": int(starts.size)},
        )
    return ranges


def averaged_knots(params, n_ctrl, degree=DEGREE):
    """Interior knots by the averaging rule for least-squares approximation.

    Every knot span receives at least one parameter value, which keeps the
    collocation system well posed.
    """
    ub = np.asarray(params, dtype=float)
    m = ub.size - 1
    n = n_ctrl - 1
    p = degree
    d = (m + 1) / (n - p + 1)
    inner = np.empty(n - p)
    for j in range(1, n - p + 1):
        i = int(j * d)
        a = j * d - i
        inner[j - 1] = (1.0 - a) * ub[i - 1] + a * ub[i]
    return KnotVector.clamped(ub[0], ub[-1], inner, degree)


def _schoenberg_whitney(samples, U, first, last, degree):
    """True when basis functions ``first..last`` can each be matched to a
    distinct sample inside their open support (greedy, samples sorted)."""
    k = 0
    for j in range(first, last + 1):
        lo, hi = U[j], U[j + degree + 1]
        while k < len(samples) and samples[k] <= lo:
            k += 1
        if k >= len(samples) or samples[k] >= hi:
            return False
        k += 1
    return True


def approximate_segment(times, samples, degree=DEGREE, n_ctrl=None, t_first=None, t_last=None,
                        max_condition=1e6):
    """Least-squares B-spline through pose samples with pinned end points.

    ``samples`` is ``(m+1, 7)``. The first and last samples are attached to
    the ends of the domain ``[t_first, t_last]`` (defaulting to the first and
    last sample times) and fix the first and last control points; the
    remaining control points minimize the squared distance to the interior
    samples. Quaternion blocks are hemisphere-aligned first.
    """
    times = np.asarray(times, dtype=float)
    d = np.array(samples, dtype=float)
    m = times.size - 1
    if d.shape != (m + 1, 7):
        raise ValueError("samples must have shape (len(times), 7)")
    if np.any(np.diff(times) < 0):
        raise ValueError("samples must be time-ordered")
    p = degree
    if n_ctrl is None:
        n_ctrl = m + 1
    if n_ctrl < p + 1:
        raise ValueError(f"need at least {p + 1} control points")
    if n_ctrl > m + 1:
        raise ValueError("more control points than samples")
    t_first = times[0] if t_first is None else float(t_first)
    t_last = times[-1] if t_last is None else float(t_last)
    if t_first > times[0] or t_last < times[-1] or not t_last > t_first:
        raise ValueError("segment domain must contain all sample times")

    d[:, 3:] = hemisphere_align(d[:, 3:])
    params = times.copy()
    params[0], params[-1] = t_first, t_last
    knots = averaged_knots(params, n_ctrl, p)
    n = n_ctrl - 1
    if n > 1 and not _schoenberg_whitney(params[1:m], knots.knots, 1, n - 1, p):
        # the pinned end samples do not constrain the free control points
        raise ConditioningError(f"{n_ctrl} control points are not determined by the interior samples")
    P = np.zeros((n_ctrl, 7))
    P[0], P[n] = d[0], d[m]
    if n > 1:
        B = basis_matrix(params, knots)
        rhs = d[1:m] - np.outer(B[1:m, 0], P[0]) - np.outer(B[1:m, n], P[n])
        A = B[1:m, 1:n]
        sv = np.linalg.svd(A, compute_uv=False)
        cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        if not cond < max_condition:
            raise ConditioningError("ill-conditioned spline approximation system", cond)
        P[1:n] = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return SplineSegment(knots, P)
