"""Plane-to-image homographies."""

import numpy as np

from .errors import DegenerateGeometryError


def _normalizer(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(np.mean(np.sum((pts - c) ** 2, axis=1)))
    if not d > 0:
        raise DegenerateGeometryError("points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def estimate_homography(image_points, board_points):
    """Normalized DLT homography ``H`` with ``image ~ H @ [bx, by, 1]``.

    ``H[2, 2]`` is scaled to 1. Raises :class:`DegenerateGeometryError` for
    fewer than 4 points or (near-)collinear configurations.
    """
    img = np.asarray(image_points, dtype=float).reshape(-1, 2)
    brd = np.asarray(board_points, dtype=float)[:, :2].reshape(-1, 2)
    if len(img) != len(brd):
        raise ValueError("point lists differ in length")
    if len(img) < 4:
        raise DegenerateGeometryError("homography needs at least 4 correspondences")
    for pts in (img, brd):
        q = pts - pts.mean(axis=0)
        sv = np.linalg.svd(q, compute_uv=False)
        if sv[-1] <= 1e-9 * max(sv[0], 1e-300):
            raise DegenerateGeometryError("collinear points do not determine a homography")
    Ti, Tb = _normalizer(img), _normalizer(brd)
    a = (np.column_stack([img, np.ones(len(img))]) @ Ti.T)[:, :2]
    b = (np.column_stack([brd, np.ones(len(brd))]) @ Tb.T)[:, :2]
    n = len(a)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = b
    A[0::2, 2] = 1
    A[0::2, 6:8] = -a[:, :1] * b
    A[0::2, 8] = -a[:, 0]
    A[1::2, 3:5] = b
    A[1::2, 5] = 1
    A[1::2, 6:8] = -a[:, 1:2] * b
    A[1::2, 8] = -a[:, 1]
    _, sv, vt = np.linalg.svd(A)
    if sv[-2] <= 1e-12 * sv[0]:
        raise DegenerateGeometryError("homography system is rank deficient")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.solve(Ti, Hn @ Tb)
    if abs(H[2, 2]) < 1e-15:
        raise DegenerateGeometryError("homography maps the board origin to infinity")
    return H / H[2, 2]


def homographies_from_4pts(src, dst):
    """Exact homographies for batches of 4 correspondences.

    ``src``/``dst`` have shape ``(B, 4, 2)``; returns ``(B, 3, 3)`` with NaNs
    for degenerate quadruples.
    """
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    B = src.shape[0]
    Ts, Td = _batch_normalizer(src), _batch_normalizer(dst)
    src = _batch_apply(Ts, src)
    dst = _batch_apply(Td, dst)
    A = np.zeros((B, 8, 8))
    rhs = np.zeros((B, 8))
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    A[:, 0::2, 0] = x
    A[:, 0::2, 1] = y
    A[:, 0::2, 2] = 1
    A[:, 0::2, 6] = -u * x
    A[:, 0::2, 7] = -u * y
    A[:, 1::2, 3] = x
    A[:, 1::2, 4] = y
    A[:, 1::2, 5] = 1
    A[:, 1::2, 6] = -v * x
    A[:, 1::2, 7] = -v * y
    rhs[:, 0::2] = u
    rhs[:, 1::2] = v
    H = np.full((B, 3, 3), np.nan)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(np.nan_to_num(A, nan=0.0))
    ok = np.isfinite(cond) & (cond < 1e10)
    if ok.any():
        h = np.linalg.solve(A[ok], rhs[ok][..., None])[..., 0]
        Hn = np.concatenate([h, np.ones((h.shape[0], 1))], axis=1).reshape(-1, 3, 3)
        Hd = np.linalg.solve(Td[ok], Hn @ Ts[ok])
        with np.errstate(divide="ignore", invalid="ignore"):
            Hd = Hd / Hd[:, 2:3, 2:3]
        Hd[~np.all(np.isfinite(Hd), axis=(1, 2))] = np.nan
        H[ok] = Hd
    return H


def _batch_normalizer(pts):
    c = pts.mean(axis=1)
    d = np.sqrt(np.mean(np.sum((pts - c[:, None]) ** 2, axis=2), axis=1))
    s = np.sqrt(2.0) / np.where(d > 0, d, np.nan)
    T = np.zeros((len(pts), 3, 3))
    T[:, 0, 0] = T[:, 1, 1] = s
    T[:, 0, 2] = -s * c[:, 0]
    T[:, 1, 2] = -s * c[:, 1]
    T[:, 2, 2] = 1.0
    return T


def _batch_apply(T, pts):
    return pts * T[:, None, [0, 1], [0, 1]] + T[:, None, [0, 1], 2]


def apply_homography(H, pts):
    """Map 2-D points through ``H``; batched over leading axes of ``H``."""
    pts = np.asarray(pts, float)
    ph = np.concatenate([pts[..., :2], np.ones(pts.shape[:-1] + (1,))], axis=-1)
    q = ph @ np.swapaxes(H, -1, -2)
    return q[..., :2] / q[..., 2:3]
