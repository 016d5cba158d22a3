"""Perspective camera with inverse radial distortion.

Pixels are lifted to the normalized image plane by

    P = ((px - cx) / fx, (py - cy) / fy)
    beta = 1 + k1 a^2 + k2 a^4 + k3 a^6 + k4 a^8 + k5 a^10,  a = |P|
    normalize(m) = (beta * Px, beta * Py, 1)

The forward direction (3-D point to pixel) has no closed form under this
model and is computed with a bracketed Newton solve on the scalar radial map
``a -> a * beta(a)``. Only ``normalize`` enters the back-end objective.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateGeometryError, DomainError

N_PARAMS = 9
_ALPHA_SEARCH = 3.0


@dataclass(frozen=True)
class Intrinsics:
    """Intrinsic vector ``[fx, fy, cx, cy, k1..k5]``."""

    fx: float
    fy: float
    cx: float
    cy: float
    dist: tuple = field(default=(0.0, 0.0, 0.0, 0.0, 0.0))

    def __post_init__(self):
        dist = tuple(float(d) for d in self.dist)
        if len(dist) < 5:
            dist = dist + (0.0,) * (5 - len(dist))
        if len(dist) != 5:
            raise ValueError("expected at most 5 distortion coefficients")
        object.__setattr__(self, "dist", dist)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    @classmethod
    def from_array(cls, k):
        k = np.asarray(k, dtype=float).ravel()
        if k.size != N_PARAMS:
            raise ValueError(f"expected {N_PARAMS} intrinsic parameters, got {k.size}")
        return cls(k[0], k[1], k[2], k[3], tuple(k[4:]))

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy, *self.dist])

    def alpha_max(self, width, height):
        """Largest distorted normalized radius reached inside the sensor."""
        xs = np.array([0.0, width - 1.0])
        ys = np.array([0.0, height - 1.0])
        px = (xs[:, None] - self.cx) / self.fx
        py = (ys[None, :] - self.cy) / self.fy
        return float(np.sqrt(px**2 + py**2).max())

    def validate(self, width, height, n_samples=64):
        """Raise :class:`DomainError` unless beta > 0 and the radial map is
        monotone over the sensor's radial range."""
        a = np.linspace(0.0, self.alpha_max(width, height), n_samples)
        beta, dbeta = _beta(self.as_array(), a)
        if np.any(beta <= 0):
            raise DomainError("inverse distortion factor beta is not positive over the sensor")
        if np.any(beta + a * dbeta <= 0):
            raise DomainError("inverse radial map is not monotone over the sensor")
        return self


def _params(k):
    if isinstance(k, Intrinsics):
        return k.as_array()
    k = np.asarray(k, dtype=float)
    if k.shape != (N_PARAMS,):
        raise ValueError(f"expected {N_PARAMS} intrinsic parameters, got shape {k.shape}")
    return k


def _beta(k, alpha):
    """beta(alpha) and d beta / d alpha."""
    s = alpha * alpha
    dist = k[4:]
    beta = np.ones_like(s)
    dbeta_ds = np.zeros_like(s)
    spow = np.ones_like(s)
    for m, km in enumerate(dist, start=1):
        dbeta_ds = dbeta_ds + m * km * spow
        spow = spow * s
        beta = beta + km * spow
    return beta, 2.0 * alpha * dbeta_ds


def normalize(k, m):
    """Lift pixel(s) ``m`` of shape ``(..., 2)`` to the normalized plane."""
    k = _params(k)
    m = np.asarray(m, dtype=float)
    P = np.stack([(m[..., 0] - k[2]) / k[0], (m[..., 1] - k[3]) / k[1]], axis=-1)
    beta, _ = _beta(k, np.sqrt(np.sum(P * P, axis=-1)))
    out = np.empty(m.shape[:-1] + (3,))
    out[..., :2] = beta[..., None] * P
    out[..., 2] = 1.0
    return out


def normalize_jacobian(k, m):
    """Normalized points with derivatives.

    Returns ``(n, dn_dk, dn_dm)`` with shapes ``(N, 3)``, ``(N, 2, 9)`` and
    ``(N, 2, 2)``; the constant third component of ``n`` is omitted from the
    derivatives.
    """
    k = _params(k)
    m = np.atleast_2d(np.asarray(m, dtype=float))
    fx, fy, cx, cy = k[:4]
    P = np.stack([(m[:, 0] - cx) / fx, (m[:, 1] - cy) / fy], axis=-1)
    s = np.sum(P * P, axis=-1)
    beta = np.ones_like(s)
    beta_s = np.zeros_like(s)
    spow = np.ones_like(s)
    powers = []
    for mm, km in enumerate(k[4:], start=1):
        beta_s += mm * km * spow
        spow = spow * s
        beta += km * spow
        powers.append(spow)

    n = np.empty((len(m), 3))
    n[:, :2] = beta[:, None] * P
    n[:, 2] = 1.0

    # dn/dP = beta I + 2 beta_s P P^T
    dn_dP = 2.0 * beta_s[:, None, None] * P[:, :, None] * P[:, None, :]
    dn_dP[:, 0, 0] += beta
    dn_dP[:, 1, 1] += beta

    dn_dk = np.zeros((len(m), 2, N_PARAMS))
    dn_dk[:, :, 0] = dn_dP[:, :, 0] * (-P[:, 0:1] / fx)
    dn_dk[:, :, 1] = dn_dP[:, :, 1] * (-P[:, 1:2] / fy)
    dn_dk[:, :, 2] = dn_dP[:, :, 0] * (-1.0 / fx)
    dn_dk[:, :, 3] = dn_dP[:, :, 1] * (-1.0 / fy)
    for j, sp in enumerate(powers):
        dn_dk[:, :, 4 + j] = P * sp[:, None]

    dn_dm = dn_dP * np.array([1.0 / fx, 1.0 / fy])[None, None, :]
    return n, dn_dk, dn_dm


def _monotone_limit(k, search=_ALPHA_SEARCH, n=2049):
    """Largest alpha (<= search) up to which ``alpha * beta(alpha)`` increases."""
    a = np.linspace(0.0, search, n)
    beta, dbeta = _beta(k, a)
    bad = np.flatnonzero((beta + a * dbeta <= 0) | (beta <= 0))
    if bad.size == 0:
        return search
    if bad[0] == 0:
        return 0.0
    return float(a[bad[0] - 1])


def _solve_radial(rho, lo_val, hi_val, g, dg, tol=1e-15, max_iter=100):
    """Bracketed Newton for ``g(a) = rho`` on ``[lo_val, hi_val]``, vectorized."""
    lo = np.full_like(rho, lo_val)
    hi = np.full_like(rho, hi_val)
    a = np.clip(rho, lo, hi)
    for _ in range(max_iter):
        f = g(a) - rho
        if np.all(np.abs(f) <= tol * np.maximum(1.0, rho)):
            break
        lo = np.where(f < 0, a, lo)
        hi = np.where(f > 0, a, hi)
        d = dg(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            a_new = a - f / d
        bad = ~np.isfinite(a_new) | (a_new <= lo) | (a_new >= hi)
        a = np.where(bad, 0.5 * (lo + hi), a_new)
    return a


def project(k, X, strict=True):
    """Project camera-frame points ``(..., 3)`` to pixels.

    With ``strict`` a :class:`DomainError` is raised for points behind the
    camera or beyond the invertible radial range; otherwise those pixels are
    returned as NaN.
    """
    k = _params(k)
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    behind = ~(z > 0)
    if strict and np.any(behind):
        raise DomainError("cannot project points with non-positive depth")
    with np.errstate(divide="ignore", invalid="ignore"):
        nx = X[..., 0] / z
        ny = X[..., 1] / z
    rho = np.sqrt(nx * nx + ny * ny)

    a_lim = _monotone_limit(k)
    beta_lim, _ = _beta(k, np.array(a_lim))
    rho_lim = a_lim * float(beta_lim)
    outside = behind | ~(rho <= rho_lim)
    if strict and np.any(outside):
        raise DomainError(
            f"radial map is not invertible at normalized radius {np.nanmax(rho):.4g} "
            f"(limit {rho_lim:.4g})"
        )

    def g(a):
        return a * _beta(k, a)[0]

    def dg(a):
        b, db = _beta(k, a)
        return b + a * db

    rho_c = np.where(outside, 0.0, rho)
    alpha = _solve_radial(rho_c, 0.0, a_lim, g, dg)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(rho_c > 0, alpha / rho_c, 1.0)
    px = k[0] * nx * scale + k[2]
    py = k[1] * ny * scale + k[3]
    out = np.stack([px, py], axis=-1)
    if np.any(outside):
        out[outside] = np.nan
    return out


class InverseFit(NamedTuple):
    coeffs: tuple
    max_residual: float


def fit_inverse_from_forward(forward_dist, alpha_max, n_samples=256):
    """Fit inverse coefficients k1..k5 to a forward radial model.

    ``forward_dist`` holds ``c1, c2, ...`` of the common forward model
    ``r_d = r_u (1 + c1 r_u^2 + c2 r_u^4 + ...)`` in normalized units.
    ``alpha_max`` is the largest distorted radius that must be covered (the
    sensor's radial range). ``max_residual`` is the largest error of the
    fitted model on the samples, in normalized units.
    """
    c = np.asarray(forward_dist, dtype=float).ravel()
    if alpha_max <= 0:
        raise DomainError("alpha_max must be positive")

    def h(r):
        out = np.ones_like(r)
        rp = np.ones_like(r)
        for cj in c:
            rp = rp * r * r
            out = out + cj * rp
        return r * out

    def dh(r):
        out = np.ones_like(r)
        rp = np.ones_like(r)
        for j, cj in enumerate(c, start=1):
            rp = rp * r * r
            out = out + (2 * j + 1) * cj * rp
        return out

    # bracket: smallest r_u reaching alpha_max, with monotonicity on the way
    r_hi = alpha_max
    for _ in range(60):
        if h(np.array(r_hi)) >= alpha_max:
            break
        r_hi *= 1.5
    else:
        raise DomainError("forward model never reaches the sensor's radial range")
    grid = np.linspace(0.0, r_hi, 4097)
    reach = np.flatnonzero(h(grid) >= alpha_max)[0]
    if np.any(dh(grid[: reach + 1]) <= 0):
        raise DomainError("forward distortion model is not monotone over the sensor")

    alpha = np.linspace(0.0, alpha_max, n_samples + 1)[1:]
    r_u = _solve_radial(alpha, 0.0, float(grid[reach]), h, dh)
    beta = r_u / alpha
    A = np.stack([alpha ** (2 * j) for j in range(1, 6)], axis=1)
    scale = np.abs(A).max(axis=0)
    coef, *_ = np.linalg.lstsq(A / scale, beta - 1.0, rcond=None)
    coef = coef / scale
    fitted = alpha * (1.0 + A @ coef)
    return InverseFit(tuple(float(x) for x in coef), float(np.max(np.abs(fitted - r_u))))


class InverseRadialCamera:
    """Default camera model plugged into the back-end.

    Any replacement needs ``n_params`` and ``normalize_jacobian(params, m)``
    with the same return layout as :func:`normalize_jacobian`; an optional
    ``is_valid(params, width, height)`` lets the solver reject steps to an
    unusable model.
    """

    n_params = N_PARAMS

    @staticmethod
    def normalize(params, m):
        return normalize(params, m)

    @staticmethod
    def normalize_jacobian(params, m):
        return normalize_jacobian(params, m)

    @staticmethod
    def project(params, X, strict=True):
        return project(params, X, strict=strict)

    @staticmethod
    def is_valid(params, width, height):
        try:
            Intrinsics.from_array(params).validate(width, height)
        except (DomainError, ValueError):
            return False
        return True
