"""DBSCAN on event pixels."""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

NOISE = -1


def neighbor_pairs(points, eps):
    """All ordered pairs ``(i, j)`` with ``|p_i - p_j| <= eps``, self pairs included."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    pairs = cKDTree(pts).query_pairs(eps, output_type="ndarray").astype(np.int64)
    self_idx = np.arange(n, dtype=np.int64)
    i = np.concatenate([self_idx, pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([self_idx, pairs[:, 1], pairs[:, 0]])
    return i, j


def dbscan(points, eps, min_pts):
    """Label each point with a cluster id (0, 1, ...) or ``NOISE``.

    A point is core when at least ``min_pts`` points, itself included, lie
    within ``eps``. Cluster ids follow the index of each cluster's first core
    point; a border point reachable from several clusters joins the lowest id.
    """
    if not eps > 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    i, j = neighbor_pairs(pts, eps)
    core = np.bincount(i, minlength=n) >= min_pts
    if not core.any():
        return labels

    core_idx = np.flatnonzero(core)
    remap = np.full(n, -1)
    remap[core_idx] = np.arange(core_idx.size)
    cc = core[i] & core[j] & (i < j)
    graph = coo_matrix(
        (np.ones(int(cc.sum()), dtype=np.int8), (remap[i[cc]], remap[j[cc]])),
        shape=(core_idx.size,) * 2,
    ).tocsr()
    _, comp = connected_components(graph, directed=False)
    # order components by their lowest core index
    first = np.full(comp.max() + 1, n)
    np.minimum.at(first, comp, core_idx)
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    labels[core_idx] = rank[comp]

    border = ~core[i] & core[j]
    if border.any():
        bi = i[border]
        cand = labels[j[border]]
        best = np.full(n, np.iinfo(np.int64).max)
        np.minimum.at(best, bi, cand)
        hit = best != np.iinfo(np.int64).max
        labels[hit] = best[hit]
    return labels


def lower_median(values):
    """Element ``floor((n-1)/2)`` of the sorted values."""
    v = np.asarray(values, dtype=float)
    k = (v.size - 1) // 2
    return float(np.partition(v, k)[k])


@dataclass(eq=False)
class Cluster:
    """Same-polarity group of window events.

    ``member_indices`` index into the window's events; ``points`` holds the
    corresponding pixel coordinates.
    """

    member_indices: np.ndarray
    center: np.ndarray
    polarity: int
    points: np.ndarray = field(repr=False)

    @property
    def size(self):
        return len(self.member_indices)


def _clusters_for(xy, idx, polarity, eps, min_pts, min_cluster_size):
    if idx.size == 0:
        return []
    labels = dbscan(xy[idx], eps, min_pts)
    out = []
    if labels.max(initial=NOISE) < 0:
        return out
    order = np.argsort(labels, kind="stable")
    sl = labels[order]
    bounds = np.flatnonzero(np.diff(sl)) + 1
    for grp in np.split(order, bounds):
        if labels[grp[0]] == NOISE or grp.size < min_cluster_size:
            continue
        members = idx[grp]
        pts = xy[members]
        center = np.array([lower_median(pts[:, 0]), lower_median(pts[:, 1])])
        out.append(Cluster(members, center, polarity, pts))
    return out


def extract_clusters(window, eps=3.0, min_pts=4, min_cluster_size=8):
    """Cluster positive and negative events of a window separately.

    Returns ``(positive_clusters, negative_clusters)``; clusters with fewer
    than ``min_cluster_size`` members are dropped as noise.
    """
    events = getattr(window, "events", window)
    xy = events.xy
    pos = np.flatnonzero(events.p > 0)
    neg = np.flatnonzero(events.p < 0)
    return (
        _clusters_for(xy, pos, 1, eps, min_pts, min_cluster_size),
        _clusters_for(xy, neg, -1, eps, min_pts, min_cluster_size),
    )
