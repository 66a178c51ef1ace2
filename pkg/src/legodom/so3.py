"""Rotation-group helpers used by the error-state filter.

Rotations are plain ``(3, 3)`` numpy arrays. Rotation errors are 3-vectors in
the tangent space at the *right* (body-frame) side::

    R = R_hat @ exp(dtheta)        # boxplus
    dtheta = log(R_hat.T @ R)      # boxminus
"""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

SMALL_ANGLE = 1e-8
ORTHO_TOL = 1e-9
LOG_INPUT_TOL = 1e-6
_I3 = np.eye(3)


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def cross(a, b) -> np.ndarray:
    """3-vector cross product (``np.cross`` is slow for single vectors)."""
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def vee(S: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew` applied to the antisymmetric part of ``S``."""
    return 0.5 * np.array([S[2, 1] - S[1, 2], S[0, 2] - S[2, 0], S[1, 0] - S[0, 1]])


def exp_so3(theta) -> np.ndarray:
    """Rodrigues formula, with a second-order series below ``SMALL_ANGLE``."""
    x, y, z = (float(c) for c in theta)
    angle2 = x * x + y * y + z * z
    angle = math.sqrt(angle2)
    if angle < SMALL_ANGLE:
        a, b = 1.0, 0.5
    else:
        a = math.sin(angle) / angle
        b = (1.0 - math.cos(angle)) / angle2
    # I + a K + b K^2 with K = skew(theta), K^2 = theta theta^T - |theta|^2 I
    d = 1.0 - b * angle2
    return np.array([[d + b * x * x, b * x * y - a * z, b * x * z + a * y],
                     [b * x * y + a * z, d + b * y * y, b * y * z - a * x],
                     [b * x * z - a * y, b * y * z + a * x, d + b * z * z]])


def orthonormality_error(R: np.ndarray) -> float:
    return _ortho_error_rows(np.asarray(R, dtype=float).tolist())


def _ortho_error_rows(r):
    """Frobenius norm of ``R^T R - I`` for ``R`` given as nested lists."""
    acc = 0.0
    for i in range(3):
        for j in range(i, 3):
            e = r[0][i] * r[0][j] + r[1][i] * r[1][j] + r[2][i] * r[2][j] - (1.0 if i == j else 0.0)
            acc += e * e if i == j else 2.0 * e * e
    return math.sqrt(acc)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` with norm in ``[0, pi]``.

    Raises
    ------
    ValueError
        If ``R`` is not orthonormal to within ``LOG_INPUT_TOL``.
    """
    R = np.asarray(R, dtype=float)
    r = R.tolist()
    err = _ortho_error_rows(r)
    if not err <= LOG_INPUT_TOL:
        raise ValueError(f"log_so3: input is not a rotation matrix (|R^T R - I| = {err:.3e})")
    # sin(angle) * axis
    wx = 0.5 * (r[2][1] - r[1][2])
    wy = 0.5 * (r[0][2] - r[2][0])
    wz = 0.5 * (r[1][0] - r[0][1])
    s = math.sqrt(wx * wx + wy * wy + wz * wz)
    c = 0.5 * (r[0][0] + r[1][1] + r[2][2] - 1.0)   # cos(angle)
    angle = math.atan2(s, c)
    if angle < SMALL_ANGLE:
        k = 1.0 + angle * angle / 6.0
        return np.array([wx * k, wy * k, wz * k])
    if c > 0.0 or s > 1e-3:
        k = angle / s
        return np.array([wx * k, wy * k, wz * k])
    # near pi: sin(angle) is tiny, take the axis from the symmetric part
    w = np.array([wx, wy, wz])
    sym = 0.5 * (R + R.T)
    aat = (sym - c * _I3) / (1.0 - c)
    i = int(np.argmax(np.diag(aat)))
    axis = aat[:, i] / np.sqrt(aat[i, i])
    if axis @ w < 0.0:
        axis = -axis
    return angle * axis


def project_to_so3(R: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (polar factor)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0.0:
        U[:, -1] = -U[:, -1]
        Q = U @ Vt
    return Q


def normalize_rotation(R: np.ndarray) -> np.ndarray:
    if orthonormality_error(R) > ORTHO_TOL:
        return project_to_so3(R)
    return R


def boxplus(R: np.ndarray, delta) -> np.ndarray:
    return normalize_rotation(R @ exp_so3(delta))


def boxminus(R1: np.ndarray, R2: np.ndarray) -> np.ndarray:
    """Local difference such that ``boxplus(R2, boxminus(R1, R2)) == R1``."""
    return log_so3(R2.T @ R1)


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    x, y, z, w = _ScipyRotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return -q if w < 0 else q


def from_quaternion(q) -> np.ndarray:
    w, x, y, z = q
    return _ScipyRotation.from_quat([x, y, z, w]).as_matrix()
