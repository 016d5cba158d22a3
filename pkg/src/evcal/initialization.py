"""Initial intrinsics and per-frame poses from detected reference frames.

Poses are camera-to-world: a camera point ``x_c`` maps to ``R @ x_c + t`` in
the pattern frame, whose plane is ``z = 0``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import least_squares

from .camera import Intrinsics, fit_inverse_from_forward, normalize, normalize_jacobian, project
from .errors import ConditioningError, DegenerateGeometryError, DomainError
from .features import CircleFeature, kasa_fit
from .geometry import rot_to_rotvec, rotation_angle, rotvec_to_rot, skew, so3_left_jacobian
from .homography import apply_homography, estimate_homography, homographies_from_4pts
from .pattern import board_points

log = logging.getLogger(__name__)

__all__ = [
    "ReferenceFrame",
    "PnPResult",
    "estimate_homography",
    "zhang_intrinsics",
    "estimate_forward_distortion",
    "pnp_ransac",
    "velocity_filter",
    "cross_validate_features",
    "initialize_intrinsics",
    "min_features_default",
]


def min_features_default(spec):
    return math.ceil(spec.size / 3)


@dataclass(eq=False)
class ReferenceFrame:
    """A detected window with its (rectified) circle correspondences.

    ``features`` maps pattern circle index to the feature observing it; it
    starts as the full detection and shrinks during cross-validation.
    """

    window: object
    detection: object
    R: np.ndarray = None
    t: np.ndarray = None
    accepted: bool = False
    features: dict = field(default=None)
    inliers: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.features is None and self.detection:
            self.features = dict(self.detection.correspondences)

    @property
    def t_ref(self):
        return self.window.t_ref

    @property
    def has_pose(self):
        return self.R is not None and self.t is not None

    @property
    def correspondences(self):
        return self.features


# --------------------------------------------------------------------------
# Zhang's closed form


def _v(H, i, j):
    hi, hj = H[:, i], H[:, j]
    return np.array([
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ])


def zhang_intrinsics(homographies, image_size=None, max_condition=1e10):
    """Closed-form ``(fx, fy, cx, cy)`` from board-to-pixel homographies.

    Each homography yields two linear constraints on the image of the
    absolute conic ``B = K^-T K^-1``; a third row forces zero skew. Pixels
    are rescaled by ``image_size = (width, height)`` (or by the spread of the
    homography translations) before solving.
    """
    Hs = [np.asarray(H, float) for H in homographies]
    if len(Hs) < 3:
        raise ValueError("Zhang's method needs at least 3 homographies")
    if image_size is not None:
        w, h = image_size
        s = 0.5 * (w + h)
        T = np.array([[1 / s, 0, -0.5 * w / s], [0, 1 / s, -0.5 * h / s], [0, 0, 1]])
    else:
        T = np.eye(3)
    rows = []
    for H in Hs:
        Hn = T @ H
        Hn = Hn / np.linalg.norm(Hn)
        rows.append(_v(Hn, 0, 1))
        rows.append(_v(Hn, 0, 0) - _v(Hn, 1, 1))
    rows.append(np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]))
    V = np.array(rows)
    _, sv, vt = np.linalg.svd(V)
    cond = sv[0] / sv[-2] if sv[-2] > 0 else np.inf
    if not cond < max_condition:
        raise ConditioningError(
            "homographies do not constrain the intrinsics", cond
        )
    B11, B12, B22, B13, B23, B33 = vt[-1]
    if B11 < 0:
        B11, B12, B22, B13, B23, B33 = -vt[-1]
    den = B11 * B22 - B12 * B12
    if not (B11 > 0 and den > 0):
        raise ConditioningError("estimated absolute conic is not positive definite", cond)
    v0 = (B12 * B13 - B11 * B23) / den
    lam = B33 - (B13 * B13 + v0 * (B12 * B13 - B11 * B23)) / B11
    if not lam > 0:
        raise ConditioningError("estimated absolute conic is not positive definite", cond)
    fx = math.sqrt(lam / B11)
    fy = math.sqrt(lam * B11 / den)
    u0 = -B13 * fx * fx / lam
    Kn = np.array([[fx, 0, u0], [0, fy, v0], [0, 0, 1]])
    K = np.linalg.solve(T, Kn)
    return float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2])


# --------------------------------------------------------------------------
# planar pose


def _pose_from_normalized_homography(H):
    """World-to-camera ``(R, t)`` from ``x_n ~ H @ [X, Y, 1]``, batched.

    Returns NaN for non-finite inputs. The sign is chosen so the board lies
    in front of the camera.
    """
    H = np.asarray(H, float)
    single = H.ndim == 2
    if single:
        H = H[None]
    h1, h2, h3 = H[:, :, 0], H[:, :, 1], H[:, :, 2]
    with np.errstate(all="ignore"):
        lam = 2.0 / (np.linalg.norm(h1, axis=1) + np.linalg.norm(h2, axis=1))
        sgn = np.where(h3[:, 2] < 0, -1.0, 1.0)
        lam = lam * sgn
        r1, r2 = lam[:, None] * h1, lam[:, None] * h2
        r3 = np.cross(r1, r2)
        M = np.stack([r1, r2, r3], axis=-1)
        t = lam[:, None] * h3
    ok = np.all(np.isfinite(M), axis=(1, 2)) & np.all(np.isfinite(t), axis=1)
    R = np.full_like(M, np.nan)
    if ok.any():
        U, _, Vt = np.linalg.svd(M[ok])
        d = np.sign(np.linalg.det(U @ Vt))
        U[:, :, 2] *= d[:, None]
        R[ok] = U @ Vt
    if single:
        return R[0], t[0]
    return R, t


def _reproj_px(k, R_cw, t_cw, X):
    Xc = np.einsum("...ij,nj->...ni", R_cw, X) + t_cw[..., None, :]
    return project(k, Xc, strict=False)


def _reproj_norm(R_cw, t_cw, X):
    Xc = np.einsum("...ij,nj->...ni", R_cw, X) + t_cw[..., None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Xc[..., :2] / Xc[..., 2:3]
    return np.where(Xc[..., 2:3] > 0, out, np.nan)


class PnPResult(NamedTuple):
    R: np.ndarray  # camera-to-world rotation
    t: np.ndarray  # camera position in the pattern frame
    inliers: np.ndarray  # sorted pattern circle indices
    rms: float


def _correspondence_arrays(corr, spec):
    idx = np.array(sorted(corr), dtype=int)
    m = np.array([np.asarray(corr[s].center if hasattr(corr[s], "center") else corr[s], float)
                  for s in idx]).reshape(-1, 2)
    X = board_points(spec)[idx]
    return idx, m, X


def pnp_ransac(correspondences, k, spec, iterations=200, inlier_tol_px=2.0, min_inliers=None,
               seed=0):
    """Planar pose from circle correspondences with RANSAC.

    ``correspondences`` maps circle index to a feature (or a pixel). Minimal
    samples of 4 points are solved by decomposing the homography between
    the board and the normalized image plane; the pose with most inliers is
    refined on its inliers by minimizing pixel reprojection error.

    Returns a :class:`PnPResult`, or ``None`` when fewer than ``min_inliers``
    (default 60% of the grid) correspondences agree.
    """
    if hasattr(correspondences, "correspondences"):
        correspondences = correspondences.correspondences
    if min_inliers is None:
        min_inliers = math.ceil(0.6 * spec.size)
    idx, m, X = _correspondence_arrays(correspondences, spec)
    n = len(idx)
    if n < 4:
        raise ValueError("PnP needs at least 4 correspondences")
    if n < min_inliers:
        return None
    k = Intrinsics.from_array(k) if not isinstance(k, Intrinsics) else k
    xn = normalize(k, m)[:, :2]
    # errors are measured on the normalized plane and scaled to pixels by
    # the mean focal length; the inverse model keeps this closed form
    f_px = 0.5 * (k.fx + k.fy)

    rng = np.random.default_rng(seed)
    samples = np.array([rng.choice(n, 4, replace=False) for _ in range(iterations)])
    H = homographies_from_4pts(X[samples][..., :2], xn[samples])
    R_cw, t_cw = _pose_from_normalized_homography(H)
    good = np.all(np.isfinite(R_cw), axis=(1, 2)) & (t_cw[:, 2] > 0)
    if not good.any():
        return None
    R_cw, t_cw = R_cw[good], t_cw[good]
    err = f_px * np.linalg.norm(_reproj_norm(R_cw, t_cw, X) - xn, axis=-1)
    err = np.where(np.isfinite(err), err, np.inf)
    inl = err <= inlier_tol_px
    count = inl.sum(axis=1)
    score = np.where(inl, err, 0.0).sum(axis=1)
    best = np.lexsort((score, -count))[0]
    if count[best] < 4:
        return None
    R0, t0 = R_cw[best], t_cw[best]
    mask = inl[best]

    for _ in range(5):
        R0, t0 = _refine_pose(R0, t0, X[mask], xn[mask])
        e = f_px * np.linalg.norm(_reproj_norm(R0, t0, X) - xn, axis=-1)
        new = np.isfinite(e) & (e <= inlier_tol_px)
        if np.array_equal(new, mask) or new.sum() < 4:
            break
        mask = new
    if mask.sum() < min_inliers:
        return None
    e = f_px * np.linalg.norm(_reproj_norm(R0, t0, X[mask]) - xn[mask], axis=-1)
    return PnPResult(R0.T, -R0.T @ t0, idx[mask], float(np.sqrt(np.mean(e**2))))


def _refine_pose(R_cw, t_cw, X, xn):
    x0 = np.concatenate([rot_to_rotvec(R_cw), t_cw])

    def fun(p):
        r = _reproj_norm(rotvec_to_rot(p[:3]), p[3:], X) - xn
        return np.nan_to_num(r.ravel(), nan=1.0)

    sol = least_squares(fun, x0, method="lm", xtol=1e-14, ftol=1e-14)
    return rotvec_to_rot(sol.x[:3]), sol.x[3:]


# --------------------------------------------------------------------------
# distortion and the alternating intrinsic estimate


def estimate_forward_distortion(k, frames, spec, n_coeffs=2):
    """Linear least-squares forward radial coefficients.

    Observed pixels lifted with the distortion-free part of ``k`` are
    compared with the ideal projections of the posed board points:
    ``x_d = x_u (1 + c1 r^2 + c2 r^4)``.
    """
    L = board_points(spec)
    A_rows, b_rows = [], []
    for f in frames:
        if not f.has_pose:
            continue
        idx = np.array(sorted(f.features))
        m = np.array([f.features[s].center for s in idx])
        xd = np.column_stack([(m[:, 0] - k.cx) / k.fx, (m[:, 1] - k.cy) / k.fy])
        Xc = (L[idx] - f.t) @ f.R
        xu = Xc[:, :2] / Xc[:, 2:3]
        r2 = np.sum(xu * xu, axis=1)
        cols = [xu * (r2 ** j)[:, None] for j in range(1, n_coeffs + 1)]
        A_rows.append(np.stack([c.ravel() for c in cols], axis=1))
        b_rows.append((xd - xu).ravel())
    if not A_rows:
        raise ValueError("no posed frames to estimate distortion from")
    A = np.concatenate(A_rows)
    b = np.concatenate(b_rows)
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    return tuple(float(c) for c in coef)


def _frame_arrays(f, L):
    idx = np.array(sorted(f.features))
    return idx, np.array([f.features[s].center for s in idx]), L[idx]


def refine_intrinsics(frames, k, spec, n_dist=2, max_frames=40, loss_scale_px=1.0):
    """Joint nonlinear refinement of ``fx, fy, cx, cy, k1..k{n_dist}`` and
    the poses of up to ``max_frames`` evenly spread posed frames.

    Residuals are normalized-plane differences scaled by the focal lengths,
    i.e. approximately pixels, under a Huber loss. Frame poses are not
    written back. Returns the refined intrinsics.
    """
    posed = [f for f in frames if f.has_pose]
    if len(posed) < 3:
        raise ConditioningError(f"only {len(posed)} posed frames")
    pick = np.unique(np.linspace(0, len(posed) - 1, min(max_frames, len(posed))).round().astype(int))
    L = board_points(spec)
    data = [_frame_arrays(posed[i], L) for i in pick]
    m = np.concatenate([d[1] for d in data])
    X = np.concatenate([d[2] for d in data])
    fid = np.repeat(np.arange(len(data)), [len(d[0]) for d in data])
    F = len(data)
    n_k = 4 + n_dist
    # rotations are parametrized as exp(w_j) @ R0_j
    R0 = np.array([posed[i].R.T for i in pick])
    t0 = np.array([-posed[i].R.T @ posed[i].t for i in pick])
    x0 = np.concatenate([[k.fx, k.fy, k.cx, k.cy, *k.dist[:n_dist]], np.zeros(3 * F), t0.ravel()])
    P = len(m)
    rows = np.arange(2 * P)

    def unpack(x):
        kk = np.zeros(9)
        kk[: n_k] = x[:n_k]
        w = x[n_k : n_k + 3 * F].reshape(F, 3)
        t = x[n_k + 3 * F :].reshape(F, 3)
        R = np.array([rotvec_to_rot(wj) for wj in w]) @ R0
        return kk, w, R, t

    def parts(x):
        kk, w, R, t = unpack(x)
        RX = np.einsum("nij,nj->ni", R[fid], X)
        Xc = RX + t[fid]
        z = Xc[:, 2:3]
        pred = Xc[:, :2] / z
        n, dn_dk, _ = normalize_jacobian(kk, m)
        return kk, w, RX, Xc, z, pred, n[:, :2], dn_dk

    def fun(x):
        kk, _, _, _, _, pred, n, _ = parts(x)
        return ((n - pred) * kk[:2]).ravel()

    def jac(x):
        kk, w, RX, Xc, z, pred, n, dn_dk = parts(x)
        J = np.zeros((2 * P, len(x)))
        f = kk[:2]
        Jk = dn_dk[:, :, :n_k] * f[None, :, None]
        Jk[:, 0, 0] += n[:, 0] - pred[:, 0]
        Jk[:, 1, 1] += n[:, 1] - pred[:, 1]
        J[:, :n_k] = Jk.reshape(2 * P, n_k)
        # d pred / d Xc
        D = np.zeros((P, 2, 3))
        D[:, 0, 0] = D[:, 1, 1] = 1.0 / z[:, 0]
        D[:, :, 2] = -pred / z
        D = -D * f[None, :, None]
        Jw = -np.einsum("nij,njk,nkl->nil", D, skew(RX), so3_left_jacobian(w)[fid])
        for c in range(3):
            J[rows, n_k + 3 * np.repeat(fid, 2) + c] = Jw[:, :, c].ravel()
            J[rows, n_k + 3 * F + 3 * np.repeat(fid, 2) + c] = D[:, :, c].ravel()
        return J

    r0 = fun(x0)
    if not np.all(np.isfinite(r0)):
        raise DomainError("initial intrinsics give non-finite reprojections")
    sol = least_squares(fun, x0, jac=jac, method="trf", loss="huber", f_scale=loss_scale_px,
                        x_scale="jac", xtol=1e-12, ftol=1e-12, max_nfev=200)
    kk = unpack(sol.x)[0]
    k_new = Intrinsics.from_array(kk)
    log.debug("intrinsic refinement: %d evaluations, rms %.4g -> %.4g px, %s", sol.nfev,
              np.sqrt(np.mean(r0**2)), np.sqrt(np.mean(sol.fun**2)), k_new)
    return k_new


def _pose_all(frames, k, spec, seed, ransac, restrict=False):
    for f in frames:
        res = pnp_ransac(f.features, k, spec, seed=seed, **ransac)
        f.accepted = res is not None
        if res is not None:
            f.R, f.t, f.inliers = res.R, res.t, res.inliers
            if restrict:
                f.features = {s: f.features[s] for s in res.inliers}
        else:
            f.R = f.t = f.inliers = None
    return [f for f in frames if f.accepted]


def initialize_intrinsics(frames, spec, width, height, ransac=None, seed=0, refine=True,
                          max_refine_frames=40):
    """Initial intrinsics and frame poses.

    Zhang's closed form (zero skew, zero distortion) gives the pinhole part;
    PnP poses every frame; a linear forward radial fit converted to the
    inverse model seeds the distortion; a joint refinement over a subset of
    frames (as calibration toolboxes do) polishes the estimate, after which
    all frames are posed again and restricted to their PnP inliers. Frames
    whose PnP fails get ``accepted = False``.
    """
    ransac = dict(ransac or {})
    L = board_points(spec)
    Hs = []
    for f in frames:
        idx, m, X = _frame_arrays(f, L)
        try:
            Hs.append(estimate_homography(m, X))
        except DegenerateGeometryError:
            continue
    fx, fy, cx, cy = zhang_intrinsics(Hs, (width, height))
    k = Intrinsics(fx, fy, cx, cy)
    posed = _pose_all(frames, k, spec, seed, ransac)
    if len(posed) < 3:
        raise ConditioningError(f"only {len(posed)} frames could be posed")
    fwd = estimate_forward_distortion(k, posed, spec, n_coeffs=1)
    try:
        k = Intrinsics(fx, fy, cx, cy, fit_inverse_from_forward(fwd, k.alpha_max(width, height)).coeffs)
    except DomainError:
        log.warning("forward distortion %s is not invertible; starting from zero", fwd)
    log.debug("closed-form intrinsics: %s", k)
    if refine:
        _pose_all(frames, k, spec, seed, ransac)
        k = refine_intrinsics(frames, k, spec, max_frames=max_refine_frames)
    posed = _pose_all(frames, k, spec, seed, ransac, restrict=True)
    if len(posed) < 3:
        raise ConditioningError(f"only {len(posed)} frames could be posed")
    return k


# --------------------------------------------------------------------------
# outlier frames and feature cross-validation


def velocity_filter(frames, max_trans_vel=5.0, max_rot_vel=6.0):
    """Drop frames moving too fast relative to the last kept frame.

    ``frames`` must be time ordered and posed; times are the window
    reference timestamps in microseconds.
    """
    kept = []
    for f in frames:
        if not kept:
            kept.append(f)
            continue
        prev = kept[-1]
        dt = (f.t_ref - prev.t_ref) * 1e-6
        if not dt > 0:
            continue
        v = np.linalg.norm(f.t - prev.t) / dt
        w = rotation_angle(prev.R.T @ f.R) / dt
        if v <= max_trans_vel and w <= max_rot_vel:
            kept.append(f)
        else:
            log.debug("velocity filter dropped frame at %d us (%.3g m/s, %.3g rad/s)",
                      f.t_ref, v, w)
    return kept


def projected_circles(k, R, t, spec, n_boundary=32):
    """Image circles (centre, radius) of all pattern circles at pose ``(R, t)``.

    The boundary is sampled, projected and Kasa-fitted; circles that fail
    to project are NaN.
    """
    L = board_points(spec)
    ang = np.linspace(0.0, 2 * np.pi, n_boundary, endpoint=False)
    ring = spec.circle_radius * np.column_stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)])
    P = (L[:, None, :] + ring[None]).reshape(-1, 3)
    Xc = (P - t) @ R
    uv = project(k, Xc, strict=False).reshape(len(L), n_boundary, 2)
    centers = np.full((len(L), 2), np.nan)
    radii = np.full(len(L), np.nan)
    for s in range(len(L)):
        if np.all(np.isfinite(uv[s])):
            fit = kasa_fit(uv[s])
            centers[s], radii[s] = fit.center, fit.radius
    return centers, radii


def cross_validate_features(frame, k, spec, width, height, tol_cv_c=0.5, tol_cv_r=0.4,
                            assign_factor=1.5, min_features=None, min_events=6):
    """Reproject, reassign, refit and compare the circles of ``frame``.

    Window events are reassigned to the nearest reprojected circle whose
    centre is within ``assign_factor`` radii. A refit circle survives when
    its centre is within ``tol_cv_c`` reprojected radii and its radius within
    a factor ``1 +- tol_cv_r`` of the reprojection. Surviving features
    replace ``frame.features``; the frame is rejected when fewer than
    ``min_features`` remain. Returns the frame.
    """
    if min_features is None:
        min_features = min_features_default(spec)
    centers, radii = projected_circles(k, frame.R, frame.t, spec)
    inside = (
        np.isfinite(radii)
        & (centers[:, 0] - radii >= 0) & (centers[:, 0] + radii <= width - 1)
        & (centers[:, 1] - radii >= 0) & (centers[:, 1] + radii <= height - 1)
    )
    candidates = set(frame.features) & set(np.flatnonzero(inside).tolist())
    ev = frame.window.events
    xy = ev.xy
    vis = np.flatnonzero(inside)
    feats = {}
    if vis.size and len(xy):
        d = np.linalg.norm(xy[:, None, :] - centers[None, vis, :], axis=2)
        near = np.argmin(d, axis=1)
        ok = d[np.arange(len(xy)), near] <= assign_factor * radii[vis][near]
        for col, s in enumerate(vis):
            if s not in candidates:
                continue
            members = np.flatnonzero(ok & (near == col))
            if members.size < min_events:
                continue
            try:
                fit = kasa_fit(xy[members])
            except DegenerateGeometryError:
                continue
            r_p = radii[s]
            if np.linalg.norm(fit.center - centers[s]) > tol_cv_c * r_p:
                continue
            if not (1 - tol_cv_r) * r_p <= fit.radius <= (1 + tol_cv_r) * r_p:
                continue
            if not (0 <= fit.center[0] <= width - 1 and 0 <= fit.center[1] <= height - 1):
                continue
            feats[int(s)] = CircleFeature(fit.center, fit.radius, fit.error,
                                          member_indices=members)
    frame.features = feats
    if len(feats) < min_features:
        frame.accepted = False
    return frame
