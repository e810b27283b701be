"""Quaternion and Euler-angle helpers. Quaternions are (w, x, y, z)."""
from __future__ import annotations

import math

import numpy as np


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_mul(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    s = math.sin(angle / 2)
    return np.array([math.cos(angle / 2), *(axis * s)])


def quat_from_yaw(yaw: float) -> np.ndarray:
    return quat_normalize(quat_from_axis_angle((0.0, 0.0, 1.0), yaw))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def yaw_of(q) -> float:
    r = quat_to_matrix(q)
    return math.atan2(r[1, 0], r[0, 0])


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def quat_from_euler_xyz(angles) -> np.ndarray:
    """Intrinsic X-Y-Z: R = Rx(a) Ry(b) Rz(c)."""
    a, b, c = angles
    q = quat_mul(quat_mul(quat_from_axis_angle((1, 0, 0), a), quat_from_axis_angle((0, 1, 0), b)),
                 quat_from_axis_angle((0, 0, 1), c))
    return quat_normalize(q)


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def euler_xyz_from_quat(q) -> np.ndarray:
    """Intrinsic X-Y-Z angles in radians.

    Every rotation has two Euler triples, (a, b, c) with b in [-90, 90] degrees
    and (a + 180, 180 - b, c + 180). The canonical branch is the one with the
    smaller |wrap(a)| + |wrap(c)|; ties keep b in [-90, 90]. Near gimbal lock
    (|cos b| < 1e-9) roll is fixed to 0 and the combined angle goes to yaw.
    """
    r = quat_to_matrix(q)
    sb = float(np.clip(r[0, 2], -1.0, 1.0))
    b = math.asin(sb)
    if math.sqrt(max(0.0, 1.0 - sb * sb)) < 1e-9:
        a = 0.0
        c = math.atan2(r[1, 0], r[1, 1])
        return np.array([a, b, c])
    a = math.atan2(-r[1, 2], r[2, 2])
    c = math.atan2(-r[0, 1], r[0, 0])
    a2, b2, c2 = _wrap(a + math.pi), _wrap(math.pi - b), _wrap(c + math.pi)
    if abs(a2) + abs(c2) < abs(a) + abs(c) - 1e-12:
        return np.array([a2, b2, c2])
    return np.array([a, b, c])
