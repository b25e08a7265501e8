"""Rigid transforms and rotation-vector helpers.

Rotations are carried as rotation vectors (axis * angle, radians) and
expanded to matrices on demand. Poses are 4x4 homogeneous matrices.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == np.cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(rv: np.ndarray) -> np.ndarray:
    """Rodrigues formula; stable near zero angle."""
    rv = np.asarray(rv, dtype=float)
    theta = np.linalg.norm(rv)
    K = skew(rv)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    """Inverse of rotvec_to_matrix with the angle in [0, pi]."""
    trace = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(trace)
    if theta < _SMALL_ANGLE:
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # Near pi the off-diagonal reconstruction is ill-conditioned; use
        # the symmetric part.  A = (R + I)/2 = n n^T at exactly pi.
        A = (R + np.eye(3)) / 2.0
        axis_sq = np.clip(np.diag(A), 0.0, None)
        k = int(np.argmax(axis_sq))
        axis = A[:, k] / max(np.sqrt(axis_sq[k]), _SMALL_ANGLE)
        axis = axis / np.linalg.norm(axis)
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(w, axis) < 0:
            axis = -axis
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def canonicalize_rotvec(rv: np.ndarray) -> np.ndarray:
    """Wrap a rotation vector so its magnitude is at most pi."""
    rv = np.asarray(rv, dtype=float)
    theta = np.linalg.norm(rv)
    if theta <= np.pi:
        return rv.copy()
    wrapped = theta % (2.0 * np.pi)
    if wrapped > np.pi:
        wrapped -= 2.0 * np.pi
    return rv * (wrapped / theta)


def rotation_right_jacobian(rv: np.ndarray) -> np.ndarray:
    """Right Jacobian J_r of the rotation-vector chart.

    exp((rv + d)^) ~ exp(rv^) exp((J_r(rv) d)^) for small d; used to turn
    perturbations of the base rotation vector into world-frame motion.
    """
    rv = np.asarray(rv, dtype=float)
    theta = np.linalg.norm(rv)
    K = skew(rv)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    a = (1.0 - np.cos(theta)) / (theta * theta)
    b = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) - a * K + b * (K @ K)


def make_transform(rv, t) -> np.ndarray:
    """4x4 homogeneous matrix from rotation vector and translation."""
    T = np.eye(4)
    T[:3, :3] = rotvec_to_matrix(np.asarray(rv, dtype=float))
    T[:3, 3] = np.asarray(t, dtype=float)
    return T


def transform_points(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return points @ T[:3, :3].T + T[:3, 3]


def transform_point(T: np.ndarray, p) -> np.ndarray:
    return T[:3, :3] @ np.asarray(p, dtype=float) + T[:3, 3]


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation matrix taking unit vector a onto unit vector b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = float(np.dot(a, b))
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    if s < _SMALL_ANGLE:
        if c > 0:
            return np.eye(3)
        # Opposite vectors: rotate pi about any axis orthogonal to a.
        helper = np.array([1.0, 0.0, 0.0])
        if abs(a[0]) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        axis = np.cross(a, helper)
        axis /= np.linalg.norm(axis)
        return rotvec_to_matrix(np.pi * axis)
    axis /= s
    angle = np.arctan2(s, c)
    return rotvec_to_matrix(angle * axis)


def geodesic_angle(rv_a: np.ndarray, rv_b: np.ndarray) -> float:
    """Angle of the relative rotation between two rotation vectors."""
    Ra = rotvec_to_matrix(rv_a)
    Rb = rotvec_to_matrix(rv_b)
    rel = matrix_to_rotvec(Ra.T @ Rb)
    return float(np.linalg.norm(rel))


def rotvec_slerp(rv_a: np.ndarray, rv_b: np.ndarray, s: float) -> np.ndarray:
    """Point at fraction s along the rotation geodesic from rv_a to rv_b."""
    Ra = rotvec_to_matrix(rv_a)
    Rb = rotvec_to_matrix(rv_b)
    rel = matrix_to_rotvec(Ra.T @ Rb)
    return matrix_to_rotvec(Ra @ rotvec_to_matrix(s * rel))
