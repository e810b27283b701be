import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from contrail.geometry import (
    euler_xyz_from_quat, quat_conj, quat_from_axis_angle, quat_from_euler_xyz, quat_from_yaw, quat_mul,
    quat_normalize, quat_to_matrix, rot_x, rot_y, rot_z, yaw_of,
)

angles = st.floats(-math.pi, math.pi, allow_nan=False)
quats = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


def test_axis_rotations_match_matrices():
    for axis, mat in (((1, 0, 0), rot_x), ((0, 1, 0), rot_y), ((0, 0, 1), rot_z)):
        np.testing.assert_allclose(quat_to_matrix(quat_from_axis_angle(axis, 0.7)), mat(0.7), atol=1e-15)


def test_quarter_turn_about_z():
    np.testing.assert_allclose(quat_to_matrix(quat_from_yaw(math.pi / 2)) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_normalize_picks_nonnegative_w():
    q = quat_normalize([-2.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(q, [1.0, 0.0, 0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(quats, quats)
def test_product_is_matrix_product(a, b):
    a, b = quat_normalize(a), quat_normalize(b)
    np.testing.assert_allclose(quat_to_matrix(quat_mul(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(quats)
def test_conjugate_inverts(q):
    q = quat_normalize(q)
    np.testing.assert_allclose(quat_mul(q, quat_conj(q)), [1, 0, 0, 0], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(angles, st.floats(-1.5, 1.5), angles)
def test_euler_roundtrip_preserves_rotation(a, b, c):
    q = quat_from_euler_xyz((a, b, c))
    back = quat_from_euler_xyz(euler_xyz_from_quat(q))
    np.testing.assert_allclose(quat_to_matrix(back), quat_to_matrix(q), atol=1e-9)


def test_euler_is_intrinsic_xyz():
    a, b, c = 0.3, -0.4, 1.1
    np.testing.assert_allclose(quat_to_matrix(quat_from_euler_xyz((a, b, c))), rot_x(a) @ rot_y(b) @ rot_z(c),
                               atol=1e-12)


def test_canonical_branch_prefers_small_roll_and_yaw():
    # pitch beyond 90 degrees with zero roll and yaw stays on the branch with a = c = 0
    e = euler_xyz_from_quat(quat_from_euler_xyz((0.0, math.radians(135), 0.0)))
    np.testing.assert_allclose(e, [0.0, math.radians(135), 0.0], atol=1e-12)


def test_gimbal_lock_puts_angle_in_yaw():
    e = euler_xyz_from_quat(quat_from_euler_xyz((0.0, math.pi / 2, 0.4)))
    assert e[0] == 0.0
    np.testing.assert_allclose(quat_to_matrix(quat_from_euler_xyz(e)),
                               quat_to_matrix(quat_from_euler_xyz((0.0, math.pi / 2, 0.4))), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(angles)
def test_yaw_of_inverts_quat_from_yaw(y):
    assert abs(math.remainder(yaw_of(quat_from_yaw(y)) - y, 2 * math.pi)) < 1e-12
