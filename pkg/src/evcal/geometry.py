"""Rotation helpers shared by the initialization, spline and optimizer code.

Quaternions are stored scalar-last, ``(qx, qy, qz, qw)``, matching the pose
log layout. Poses are camera-to-world: ``x_world = R @ x_cam + t``.
"""

import numpy as np
from scipy.spatial.transform import Rotation


def quat_to_rot(q):
    """Rotation matrices for unit quaternions of shape ``(..., 4)``."""
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - z * w)
    R[..., 0, 2] = 2 * (x * z + y * w)
    R[..., 1, 0] = 2 * (x * y + z * w)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - x * w)
    R[..., 2, 0] = 2 * (x * z - y * w)
    R[..., 2, 1] = 2 * (y * z + x * w)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_to_quat(R):
    """Unit quaternion(s) for rotation matrices, with ``qw >= 0``."""
    q = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    return np.where(q[..., 3:4] < 0, -q, q)


def rotvec_to_rot(v):
    return Rotation.from_rotvec(np.asarray(v, dtype=float)).as_matrix()


def rot_to_rotvec(R):
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def rotation_angle(R):
    """Angle in radians of rotation matrices ``(..., 3, 3)``."""
    tr = np.trace(np.asarray(R), axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def skew(v):
    v = np.asarray(v, dtype=float)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


def so3_left_jacobian(v):
    """Left Jacobian of SO(3) at rotation vectors ``(..., 3)``.

    ``d(exp(v) x)/dv = -[exp(v) x]_x J_l(v)``.
    """
    v = np.asarray(v, dtype=float)
    th2 = np.sum(v * v, axis=-1)[..., None, None]
    th = np.sqrt(th2)
    small = th < 1e-6
    th_s = np.where(small, 1.0, th)
    a = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(th_s)) / th_s**2)
    b = np.where(small, 1.0 / 6.0 - th2 / 120.0, (th_s - np.sin(th_s)) / th_s**3)
    S = skew(v)
    return np.eye(3) + a * S + b * (S @ S)


def rotate_jacobian_quat(q, n):
    """Derivative of ``R(q) @ n`` with respect to a *unit* quaternion.

    Returns an array of shape ``(..., 3, 4)`` with columns ordered like the
    quaternion storage ``(qx, qy, qz, qw)``. Uses
    ``R(q) n = n + 2w (v x n) + 2 v (v.n) - 2 n (v.v)``.
    """
    q = np.asarray(q, dtype=float)
    n = np.asarray(n, dtype=float)
    v = q[..., :3]
    w = q[..., 3]
    vn = np.einsum("...i,...i->...", v, n)
    J = np.empty(np.broadcast_shapes(q.shape[:-1], n.shape[:-1]) + (3, 4))
    eye = np.eye(3)
    Jv = (
        -2.0 * w[..., None, None] * skew(n)
        + 2.0 * vn[..., None, None] * eye
        + 2.0 * v[..., :, None] * n[..., None, :]
        - 4.0 * n[..., :, None] * v[..., None, :]
    )
    J[..., :, :3] = Jv
    J[..., :, 3] = 2.0 * np.cross(v, n)
    return J


def pose_inverse(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -np.einsum("...ij,...j->...i", Rt, t)


def rotate_gradient_quat(q, n, a):
    """``a^T d(R(q) n)/dq`` for unit quaternions, without forming the Jacobian.

    Same convention as :func:`rotate_jacobian_quat`; shapes ``(N, 3)`` in,
    ``(N, 4)`` out.
    """
    v, w = q[:, :3], q[:, 3]
    vn = np.einsum("ni,ni->n", v, n)
    av = np.einsum("ni,ni->n", a, v)
    an = np.einsum("ni,ni->n", a, n)
    out = np.empty((len(q), 4))
    out[:, :3] = (
        2.0 * w[:, None] * np.cross(n, a)
        + 2.0 * vn[:, None] * a
        + 2.0 * av[:, None] * n
        - 4.0 * an[:, None] * v
    )
    out[:, 3] = 2.0 * np.einsum("ni,ni->n", a, np.cross(v, n))
    return out
