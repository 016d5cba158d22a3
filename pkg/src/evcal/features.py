"""Circle features from pairs of opposite-polarity event clusters.

A dark dot moving across the sensor fires negative events at its leading
pole and positive events at its trailing pole. Pairing each cluster with
nearby clusters of the other polarity and fitting a circle to the union of
their events recovers the dot.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateGeometryError


class KasaFit(NamedTuple):
    center: np.ndarray
    radius: float
    error: float


def kasa_fit(points):
    """Algebraic circle fit minimizing ``sum (x^2 + y^2 + D x + E y + F)^2``.

    ``error`` is the RMS of ``|p - center| - radius`` divided by the radius.
    Points are centered and scaled before solving, which makes the result
    equivariant under translation and rotation.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateGeometryError("circle fit needs at least 3 points")
    mean = pts.mean(axis=0)
    q = pts - mean
    scale = np.sqrt(np.mean(np.sum(q * q, axis=1)))
    if not scale > 0:
        raise DegenerateGeometryError("all points coincide")
    q = q / scale
    A = np.column_stack([q, np.ones(len(q))])
    b = -np.sum(q * q, axis=1)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] < 1e-10 * sv[0]:
        raise DegenerateGeometryError("points are collinear; circle fit is singular")
    (D, E, F), *_ = np.linalg.lstsq(A, b, rcond=None)
    c = np.array([-D / 2.0, -E / 2.0])
    r2 = c @ c - F
    if not r2 > 0:
        raise DegenerateGeometryError("circle fit produced a non-positive squared radius")
    r = np.sqrt(r2)
    dist = np.linalg.norm(q - c, axis=1)
    err = np.sqrt(np.mean((dist - r) ** 2)) / r
    return KasaFit(c * scale + mean, float(r * scale), float(err))


def kasa_fit_batch(point_sets):
    """Vectorized :func:`kasa_fit` over a list of point arrays.

    Returns ``(centers (B, 2), radii (B,), errors (B,), ok (B,))``; entries
    with ``ok == False`` are degenerate and hold NaN.
    """
    B = len(point_sets)
    out_c = np.full((B, 2), np.nan)
    out_r = np.full(B, np.nan)
    out_e = np.full(B, np.nan)
    if B == 0:
        return out_c, out_r, out_e, np.zeros(0, bool)
    lens = np.array([len(p) for p in point_sets])
    seg = np.repeat(np.arange(B), lens)
    pts = np.concatenate([np.asarray(p, float).reshape(-1, 2) for p in point_sets])
    n = lens.astype(float)

    def seg_sum(v):
        return np.bincount(seg, weights=v, minlength=B)

    mean = np.column_stack([seg_sum(pts[:, 0]), seg_sum(pts[:, 1])]) / n[:, None]
    q = pts - mean[seg]
    scale = np.sqrt(seg_sum(np.sum(q * q, axis=1)) / n)
    good = (lens >= 3) & (scale > 0)
    q = q / np.where(good, scale, 1.0)[seg, None]
    x, y = q[:, 0], q[:, 1]
    z = x * x + y * y
    # normal equations of [x y 1] [D E F]^T = -z; centred data makes the
    # 1-column orthogonal to x and y
    sxx, sxy, syy = seg_sum(x * x), seg_sum(x * y), seg_sum(y * y)
    sxz, syz, sz = seg_sum(x * z), seg_sum(y * z), seg_sum(z)
    det = sxx * syy - sxy * sxy
    good &= det > 1e-18 * np.maximum(sxx + syy, 1e-300) ** 2
    det = np.where(good, det, 1.0)
    D = -(syy * sxz - sxy * syz) / det
    E = -(sxx * syz - sxy * sxz) / det
    F = -sz / n
    cx, cy = -D / 2.0, -E / 2.0
    r2 = cx * cx + cy * cy - F
    good &= r2 > 0
    r = np.sqrt(np.where(good, r2, 1.0))
    dist = np.hypot(x - cx[seg], y - cy[seg])
    err = np.sqrt(seg_sum((dist - r[seg]) ** 2) / n) / r
    out_c[good] = np.column_stack([cx, cy])[good] * scale[good, None] + mean[good]
    out_r[good] = (r * scale)[good]
    out_e[good] = err[good]
    return out_c, out_r, out_e, good


@dataclass(eq=False)
class CircleFeature:
    """Circle hypothesis in pixels.

    ``pos_cluster``/``neg_cluster`` index the positive and negative cluster
    lists the feature was built from; ``member_indices`` are the window
    event indices of both clusters.
    """

    center: np.ndarray
    radius: float
    fit_error: float
    pos_cluster: int = -1
    neg_cluster: int = -1
    member_indices: np.ndarray = field(default=None, repr=False)

    @property
    def pair(self):
        return (self.pos_cluster, self.neg_cluster)


def _centers(clusters):
    if not clusters:
        return np.zeros((0, 2))
    return np.array([c.center for c in clusters])


def _union(a, b):
    return np.concatenate([a.points, b.points]), np.concatenate([a.member_indices, b.member_indices])


def _resolve(candidates, n_src):
    """One feature per source (lowest error), then one per target."""
    best = {}
    for cand in candidates:
        src = cand[1]
        if src not in best or cand[0] < best[src][0]:
            best[src] = cand
    used_tgt = set()
    out = []
    for cand in sorted(best.values(), key=lambda c: (c[0], c[1])):
        if cand[2] in used_tgt:
            continue
        used_tgt.add(cand[2])
        out.append(cand)
    out.sort(key=lambda c: c[1])
    return out


def _pairs(pos, neg, reverse):
    if reverse:
        return neg, pos
    return pos, neg


def _make(src_i, tgt_i, reverse, center, radius, err, members):
    p, n = (tgt_i, src_i) if reverse else (src_i, tgt_i)
    return CircleFeature(np.asarray(center, float), float(radius), float(err), p, n, members)


def angular_coverage(points, center, n_sectors=16):
    """Fraction of equal angular sectors around ``center`` holding a point."""
    q = np.asarray(points, float) - center
    ang = np.arctan2(q[:, 1], q[:, 0])
    sec = np.floor((ang + np.pi) / (2 * np.pi) * n_sectors).astype(int) % n_sectors
    return len(np.unique(sec)) / n_sectors


def _coverage_batch(point_sets, centers, n_sectors=16):
    lens = np.array([len(p) for p in point_sets])
    seg = np.repeat(np.arange(len(point_sets)), lens)
    q = np.concatenate(point_sets) - centers[seg]
    ang = np.arctan2(q[:, 1], q[:, 0])
    sec = np.floor((ang + np.pi) / (2 * np.pi) * n_sectors).astype(int) % n_sectors
    hit = np.zeros((len(point_sets), n_sectors), bool)
    hit[seg, sec] = True
    return hit.sum(axis=1) / n_sectors


def hard_extract(pos, neg, k=3, tol_d=0.25, tol_c=0.25, reverse=False, min_coverage=0.5):
    """Strict pairing: each source cluster tries its ``k`` nearest clusters of
    the opposite polarity, keeping pairs whose fitted circle agrees with the
    centre distance (diameter within ``tol_d`` relative) and midpoint (within
    ``tol_c`` radii). ``reverse`` searches from the negative clusters.

    Two facing arcs of neighbouring dots can pass both checks on a larger
    circle, and the radius-normalized error favours such circles. Pairs whose
    events occupy less than ``min_coverage`` of 16 angular sectors around the
    fitted centre are therefore rejected as well (0 disables the check).
    """
    src, tgt = _pairs(pos, neg, reverse)
    if not src or not tgt:
        return []
    sc, tc = _centers(src), _centers(tgt)
    d = np.linalg.norm(sc[:, None, :] - tc[None, :, :], axis=2)
    kk = min(k, len(tgt))
    nearest = np.argsort(d, axis=1, kind="stable")[:, :kk]
    ii = np.repeat(np.arange(len(src)), kk)
    jj = nearest.ravel()
    sel = d[ii, jj] > 0
    ii, jj = ii[sel], jj[sel]
    unions = [_union(src[i], tgt[j]) for i, j in zip(ii, jj)]
    centers, radii, errors, ok = kasa_fit_batch([u[0] for u in unions])
    dist = d[ii, jj]
    mid = 0.5 * (sc[ii] + tc[jj])
    with np.errstate(invalid="ignore"):
        ok &= np.abs(2.0 * radii - dist) <= tol_d * dist
        ok &= np.linalg.norm(centers - mid, axis=1) <= tol_c * radii
    keep = np.flatnonzero(ok)
    if min_coverage > 0 and keep.size:
        cov = _coverage_batch([unions[b][0] for b in keep], centers[keep])
        keep = keep[cov >= min_coverage]
    cands = [
        (errors[b], int(ii[b]), int(jj[b]), centers[b], radii[b], unions[b][1]) for b in keep
    ]
    return [_make(i, j, reverse, c, r, e, m) for e, i, j, c, r, m in _resolve(cands, len(src))]


def soft_extract(pos, neg, tol_soft=0.35, reverse=False):
    """Loose pairing: each source cluster pairs with its nearest opposite
    cluster and the segment between their centres is taken as the diameter.
    Pairs whose normalized circle-fit error exceeds ``tol_soft`` are dropped."""
    src, tgt = _pairs(pos, neg, reverse)
    if not src or not tgt:
        return []
    sc, tc = _centers(src), _centers(tgt)
    d = np.linalg.norm(sc[:, None, :] - tc[None, :, :], axis=2)
    nearest = np.argmin(d, axis=1)
    ii = np.flatnonzero(d[np.arange(len(src)), nearest] > 0)
    jj = nearest[ii]
    unions = [_union(src[i], tgt[j]) for i, j in zip(ii, jj)]
    _, _, errors, ok = kasa_fit_batch([u[0] for u in unions])
    ok &= errors <= tol_soft
    cands = [
        (errors[b], int(ii[b]), int(jj[b]), 0.5 * (sc[ii[b]] + tc[jj[b]]), 0.5 * d[ii[b], jj[b]], unions[b][1])
        for b in np.flatnonzero(ok)
    ]
    return [_make(i, j, reverse, c, r, e, m) for e, i, j, c, r, m in _resolve(cands, len(src))]


def mutual_consistency_filter(features_fwd, features_rev):
    """Keep forward features whose cluster pairing the reverse search also found."""
    rev_pairs = {f.pair for f in features_rev}
    return [f for f in features_fwd if f.pair in rev_pairs]


def extract_features(pos, neg, mode="soft", k=3, tol_d=0.25, tol_c=0.25, tol_soft=0.35,
                     min_coverage=0.5):
    """Forward and reverse extraction followed by the mutual check."""
    if mode == "hard":
        fwd = hard_extract(pos, neg, k, tol_d, tol_c, min_coverage=min_coverage)
        rev = hard_extract(pos, neg, k, tol_d, tol_c, reverse=True, min_coverage=min_coverage)
    elif mode == "soft":
        fwd = soft_extract(pos, neg, tol_soft)
        rev = soft_extract(pos, neg, tol_soft, reverse=True)
    else:
        raise ValueError(f"unknown extraction mode {mode!r}")
    return mutual_consistency_filter(fwd, rev)
