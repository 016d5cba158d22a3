"""Independent reference implementations used as test oracles.

Each one is written from the textbook definition, deliberately slow and
without sharing code with the package.
"""

import math

import numpy as np


def dbscan_bruteforce(points, eps, min_pts):
    """O(n^2) DBSCAN with the package's labelling conventions.

    Core: at least ``min_pts`` points within ``eps`` counting the point
    itself. Clusters are numbered in order of their lowest core index; a
    border point takes the lowest id among its core neighbours.
    """
    pts = [tuple(map(float, p)) for p in points]
    n = len(pts)
    nbrs = [[j for j in range(n) if math.dist(pts[i], pts[j]) <= eps] for i in range(n)]
    core = [len(nbrs[i]) >= min_pts for i in range(n)]
    labels = [-1] * n
    next_id = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = next_id
        stack = [i]
        while stack:
            a = stack.pop()
            for b in nbrs[a]:
                if core[b] and labels[b] == -1:
                    labels[b] = next_id
                    stack.append(b)
        next_id += 1
    for i in range(n):
        if core[i]:
            continue
        ids = [labels[j] for j in nbrs[i] if core[j]]
        if ids:
            labels[i] = min(ids)
    return np.array(labels)


def find_span_linear(u, knots, degree):
    """Span by scanning: the largest ``k`` in ``[p, n]`` with ``U[k] <= u``,
    where ``n = len(U) - p - 2`` (the right end maps to ``n``)."""
    U = list(knots)
    n = len(U) - degree - 2
    k = degree
    for i in range(degree, n + 1):
        if U[i] <= u:
            k = i
    return k


def bspline_basis(i, p, u, U):
    """Cox-de Boor recursion for ``N_{i,p}(u)``; the right domain end is
    included in the last non-empty span."""
    if p == 0:
        last = U[-1]
        if U[i] <= u < U[i + 1]:
            return 1.0
        if u == last and U[i] < U[i + 1] == last:
            return 1.0
        return 0.0
    out = 0.0
    if U[i + p] > U[i]:
        out += (u - U[i]) / (U[i + p] - U[i]) * bspline_basis(i, p - 1, u, U)
    if U[i + p + 1] > U[i + 1]:
        out += (U[i + p + 1] - u) / (U[i + p + 1] - U[i + 1]) * bspline_basis(i + 1, p - 1, u, U)
    return out


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], float)


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], float)


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], float)


def random_board_views(rng, n_views, center=(0.12, 0.045), depth=(0.35, 0.55), tilt=0.5):
    """World-to-camera ``(R, t)`` pairs looking at a board near ``center``
    from a random tilt, all with the board in front of the camera."""
    views = []
    c = np.array([center[0], center[1], 0.0])
    for _ in range(n_views):
        R = rot_z(rng.uniform(-0.4, 0.4)) @ rot_y(rng.uniform(-tilt, tilt)) @ rot_x(rng.uniform(-tilt, tilt))
        t = -R @ c + np.array([rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), rng.uniform(*depth)])
        views.append((R, t))
    return views


def plane_homography(K, R, t):
    """Board-to-pixel homography ``K [r1 r2 t]`` of a pinhole camera."""
    return K @ np.column_stack([R[:, 0], R[:, 1], t])


def central_difference(f, x, h):
    """Column-by-column central differences of a vector function."""
    x = np.asarray(x, float)
    cols = []
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        cols.append((f(xp) - f(xm)) / (2 * h[j]))
    return np.column_stack(cols)
