"""Circle-grid layout and grid detection from unordered circle features."""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateGeometryError
from .homography import apply_homography, estimate_homography, homographies_from_4pts


@dataclass(frozen=True)
class PatternSpec:
    """Planar circle grid; lengths in meters.

    In the asymmetric layout every odd column is shifted by half a spacing
    along y. Circle ``(i, j)`` gets the row-major index ``i * cols + j``.
    """

    rows: int = 4
    cols: int = 9
    spacing: float = 0.03
    circle_radius: float = 0.006
    asymmetric: bool = True

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("grid needs at least 2 rows and 2 columns")
        if not (self.spacing > 0 and 0 < self.circle_radius < self.spacing / 2):
            raise ValueError("need spacing > 0 and 0 < circle_radius < spacing / 2")

    @property
    def size(self):
        return self.rows * self.cols


def board_points(spec):
    """Metric circle centres, shape ``(rows * cols, 3)``, all with z = 0."""
    i, j = np.meshgrid(np.arange(spec.rows), np.arange(spec.cols), indexing="ij")
    i, j = i.ravel(), j.ravel()
    x = j * spec.spacing
    if spec.asymmetric:
        y = (2 * i + j % 2) * spec.spacing / 2.0
    else:
        y = i * spec.spacing
    return np.column_stack([x, y, np.zeros_like(x)]).astype(float)


@dataclass(eq=False)
class PatternDetection:
    """Complete grid assignment. ``features[s]`` observes pattern circle ``s``."""

    features: list
    board_points: np.ndarray
    homography: np.ndarray
    spec: PatternSpec = None

    @property
    def correspondences(self):
        return dict(enumerate(self.features))

    @property
    def image_points(self):
        return np.array([f.center for f in self.features])

    def row_direction(self):
        cols = self.spec.cols if self.spec is not None else None
        pts = self.image_points
        if cols is None:
            raise ValueError("detection lacks its pattern spec")
        return pts[cols - 1] - pts[0]

    def __bool__(self):
        return True


@dataclass(frozen=True)
class DetectionFailure:
    reason: str

    def __bool__(self):
        return False


def _signed_area(poly):
    x, y = poly[..., 0], poly[..., 1]
    return 0.5 * np.sum(x * np.roll(y, -1, axis=-1) - np.roll(x, -1, axis=-1) * y, axis=-1)


def _hull(pts):
    try:
        return ConvexHull(pts).vertices  # counter-clockwise
    except (QhullError, ValueError):
        return None


def _prune_flat(pts, hull, max_angle_deg):
    """Drop hull vertices whose interior angle is close to 180 degrees."""
    keep = []
    h = len(hull)
    for k in range(h):
        a, b, c = pts[hull[k - 1]], pts[hull[k]], pts[hull[(k + 1) % h]]
        u, v = a - b, c - b
        cosang = u @ v / (np.linalg.norm(u) * np.linalg.norm(v) + 1e-300)
        if np.degrees(np.arccos(np.clip(cosang, -1, 1))) <= max_angle_deg:
            keep.append(hull[k])
    return np.array(keep, dtype=int)


class _BoardGeometry:
    """Per-spec constants: extreme hull quadrilateral and neighbour pairs."""

    _cache = {}

    def __new__(cls, spec):
        key = spec
        if key not in cls._cache:
            obj = super().__new__(cls)
            obj._init(spec)
            cls._cache[key] = obj
        return cls._cache[key]

    def _init(self, spec):
        pts = board_points(spec)[:, :2]
        hull = ConvexHull(pts).vertices
        best, best_area = None, -1.0
        for combo in itertools.combinations(hull, 4):
            area = _signed_area(pts[list(combo)])
            if area > best_area:
                best, best_area = list(combo), area
        self.points = pts
        self.quad = pts[best]
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        np.fill_diagonal(d, np.inf)
        nn = d.min()
        self.pairs = np.argwhere(np.triu(d <= 1.2 * nn))
        self.nn = nn


def _assign(H, board, F):
    proj = apply_homography(H, board)
    d2 = np.sum((proj[..., :, None, :] - F[None, :, :]) ** 2, axis=-1)
    idx = np.argmin(d2, axis=-1)
    dist = np.sqrt(np.take_along_axis(d2, idx[..., None], axis=-1)[..., 0])
    return idx, dist


def detect_grid(features, spec, tol_grid=3.0, previous=None, allow_mirror=False,
                max_hull_angle=165.0):
    """Assign every pattern circle to one feature.

    Hypotheses map the board's extreme quadrilateral onto ordered quadruples
    of convex-hull features; each is refined by a least-squares homography
    and accepted when all ``rows * cols`` circles are matched one-to-one
    within ``tol_grid`` pixels. Only orientation-preserving views (pattern
    seen from the front) are considered unless ``allow_mirror``. If several
    distinct assignments survive, the one whose first-row direction is
    closest to ``previous`` wins, else the lexicographically smallest
    sequence of image points.

    Returns a :class:`PatternDetection` or a falsy :class:`DetectionFailure`.
    """
    N = spec.size
    if len(features) < N:
        return DetectionFailure(f"{len(features)} features for a {N}-circle grid")
    F_all = np.array([f.center for f in features], dtype=float)
    # canonical order makes the search independent of input ordering
    order = np.lexsort((F_all[:, 1], F_all[:, 0]))
    F_all = F_all[order]
    geo = _BoardGeometry(spec)

    result = _search(F_all, geo, N, tol_grid, allow_mirror, max_hull_angle, previous, spec)
    if result is None and len(F_all) > N:
        d = np.linalg.norm(F_all[:, None] - F_all[None], axis=2)
        np.fill_diagonal(d, np.inf)
        nn = d.min(axis=1)
        sub = np.flatnonzero(nn <= 2.0 * np.median(nn))
        if N <= len(sub) < len(F_all):
            r = _search(F_all[sub], geo, N, tol_grid, allow_mirror, max_hull_angle, previous, spec)
            if r is not None:
                result = (sub[r[0]], r[1])
    if result is None:
        return DetectionFailure("no consistent grid hypothesis")
    assign, H = result
    feats = [features[order[a]] for a in assign]
    return PatternDetection(feats, board_points(spec), H, spec)


def _search(F, geo, N, tol_grid, allow_mirror, max_hull_angle, previous, spec):
    hull = _hull(F)
    if hull is None or len(hull) < 4:
        return None
    hull = _prune_flat(F, hull, max_hull_angle)
    if len(hull) < 4:
        return None
    dst = []
    for combo in itertools.combinations(range(len(hull)), 4):
        ring = hull[list(combo)]
        for r in range(4):
            dst.append(np.roll(ring, -r))
            if allow_mirror:
                dst.append(np.roll(ring[::-1], -r))
    dst = np.array(dst)
    Hs = homographies_from_4pts(np.broadcast_to(geo.quad, (len(dst), 4, 2)), F[dst])
    ok = np.all(np.isfinite(Hs), axis=(1, 2))
    Hs = Hs[ok]
    if len(Hs) == 0:
        return None

    idx, dist = _assign(Hs, geo.points, F)
    proj = apply_homography(Hs, geo.points)
    pa, pb = geo.pairs[:, 0], geo.pairs[:, 1]
    spacing_px = np.min(np.linalg.norm(proj[:, pa] - proj[:, pb], axis=-1), axis=1)
    srt = np.sort(idx, axis=1)
    unique = np.all(np.diff(srt, axis=1) != 0, axis=1)
    good = unique & np.all(dist <= 0.4 * spacing_px[:, None], axis=1)

    found = {}
    for h in np.flatnonzero(good):
        assign = idx[h]
        key = tuple(assign)
        if key in found:
            continue
        H = Hs[h]
        refined = None
        for _ in range(4):
            try:
                H = estimate_homography(F[assign], geo.points)
            except DegenerateGeometryError:
                break
            a2, d2 = _assign(H, geo.points, F)
            if np.array_equal(a2, assign):
                refined = (a2, d2)
                break
            assign = a2
        if refined is None:
            continue
        a2, d2 = refined
        if len(np.unique(a2)) != N or d2.max() > tol_grid:
            continue
        quad_img = apply_homography(H, geo.quad)
        if not allow_mirror and _signed_area(quad_img) <= 0:
            continue
        found.setdefault(tuple(a2), (a2, H))
    if not found:
        return None
    cands = list(found.values())
    if len(cands) == 1:
        return cands[0]
    if previous is not None:
        ref = previous.row_direction()

        def angle(c):
            v = F[c[0][spec.cols - 1]] - F[c[0][0]]
            return np.arccos(np.clip(v @ ref / (np.linalg.norm(v) * np.linalg.norm(ref)), -1, 1))

        return min(cands, key=lambda c: (angle(c), tuple(F[c[0]].ravel())))
    return min(cands, key=lambda c: tuple(F[c[0]].ravel()))


def row_angle(current, previous):
    a, b = current.row_direction(), previous.row_direction()
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def orientation_consistency_check(current, previous, dt, max_rot_rate=4.0):
    """True when the first pattern row turned by at most ``max_rot_rate`` rad/s."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return row_angle(current, previous) / dt <= max_rot_rate
