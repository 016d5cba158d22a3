"""Pose logs and absolute trajectory error.

Pose log layout: one pose per line, ``t_us tx ty tz qx qy qz qw``,
space-separated; lines starting with ``#`` are comments.
"""

from typing import NamedTuple

import numpy as np

from .errors import EvcalError

POSE_LOG_HEADER = "# t_us tx ty tz qx qy qz qw"


def write_pose_log(path, t_us, poses):
    t_us = np.asarray(t_us)
    poses = np.asarray(poses, dtype=float).reshape(-1, 7)
    with open(path, "w") as f:
        f.write(POSE_LOG_HEADER + "\n")
        for t, row in zip(t_us.tolist(), poses.tolist()):
            f.write(f"{t!r} " + " ".join(repr(v) for v in row) + "\n")


def read_pose_log(path):
    """Return ``(t_us, poses)`` with poses of shape ``(n, 7)``."""
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise EvcalError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise EvcalError(f"{path}:{lineno}: non-numeric field") from None
    arr = np.array(rows, dtype=float).reshape(-1, 8)
    return arr[:, 0], arr[:, 1:]


class ATEStats(NamedTuple):
    rmse: float
    mean: float
    median: float
    std: float
    n: int


def associate(t_est, t_gt, max_offset_us=20000.0):
    """Nearest-timestamp matches ``(i_est, i_gt)`` within ``max_offset_us``."""
    t_est = np.asarray(t_est, float)
    t_gt = np.asarray(t_gt, float)
    if t_gt.size == 0 or t_est.size == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(t_gt, kind="stable")
    tg = t_gt[order]
    pos = np.clip(np.searchsorted(tg, t_est), 1, tg.size - 1) if tg.size > 1 else np.zeros(t_est.size, int)
    if tg.size > 1:
        left = pos - 1
        pick = np.where(np.abs(tg[left] - t_est) <= np.abs(tg[pos] - t_est), left, pos)
    else:
        pick = pos
    ok = np.abs(tg[pick] - t_est) <= max_offset_us
    return np.flatnonzero(ok), order[pick[ok]]


def align_rigid(src, dst):
    """Rotation ``R`` and translation ``t`` minimizing ``|R src + t - dst|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def absolute_trajectory_error(t_est, est_pos, t_gt, gt_pos, max_offset_us=20000.0):
    """Translational error statistics after rigid alignment of the estimate."""
    i, j = associate(t_est, t_gt, max_offset_us)
    if i.size == 0:
        raise EvcalError("no timestamp associations between the trajectories")
    src = np.asarray(est_pos, float)[i, :3]
    dst = np.asarray(gt_pos, float)[j, :3]
    if i.size >= 3:
        R, t = align_rigid(src, dst)
    else:
        R, t = np.eye(3), (dst - src).mean(axis=0)
    err = np.linalg.norm(src @ R.T + t - dst, axis=1)
    return ATEStats(
        float(np.sqrt(np.mean(err**2))),
        float(err.mean()),
        float(np.median(err)),
        float(err.std()),
        int(i.size),
    )
