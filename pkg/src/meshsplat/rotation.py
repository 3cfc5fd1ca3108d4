"""Quaternion/rotation helpers with analytic adjoints."""

from __future__ import annotations

import numpy as np


def normalize_quats(q):
    """Unit quaternions plus the norm needed by the backward pass."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norm, norm


def quat_to_rotmat(q_unit):
    """Rotation matrices from unit quaternions (w, x, y, z). (n,4)->(n,3,3)."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    R = np.empty((len(q_unit), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q_unit, dR):
    """Adjoint of quat_to_rotmat w.r.t. the *unit* quaternion."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    g = dR
    dw = 2 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2]
        + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    dx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2]
        + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    dy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
        + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    dz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
        + w * g[:, 1, 0] - 2 * z * g[:, 1, 1] + y * g[:, 1, 2]
        + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=1)


def quat_backward_through_normalization(q_unit, norm, dq_unit):
    """Adjoint of q -> q/|q| given the unit result and the original norm."""
    proj = np.einsum("ij,ij->i", q_unit, dq_unit)[:, None]
    return (dq_unit - q_unit * proj) / norm


def rotmat_to_quat(R):
    """Unit quaternions (w, x, y, z) from rotation matrices. (n,3,3)->(n,4)."""
    R = np.asarray(R, dtype=np.float64)
    n = len(R)
    q = np.empty((n, 4))
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    for i in range(n):
        m = R[i]
        if tr[i] > 0:
            s = np.sqrt(tr[i] + 1.0) * 2
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s,
                    (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                    (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                    0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                    (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def rotation_about_axis(axis, angle):
    """Rodrigues rotation matrix about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
