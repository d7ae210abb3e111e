"""Kinematics and per-leg dynamics against symbolic and numeric oracles."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_joint_angles, random_joint_state
from oracles import (
    dynamics_oracle,
    fd_gradient,
    fd_jacobian,
    fk_oracle,
    jacobian_oracle,
    potential_energy,
)
from quadloco.model import (
    BodyState,
    JointState,
    NearSingularityError,
    RobotDescription,
    UnreachableTargetError,
    euler_rate_matrix,
    forward_kinematics,
    inverse_kinematics,
    leg_dynamics_terms,
    leg_jacobian,
    operational_mass,
    operational_mass_damped,
    rot_x,
    rot_y,
    rot_z,
    rpy_matrix,
    rpy_rates_from_omega,
    standing_joint_angles,
)


def test_forward_kinematics_matches_symbolic_oracle(desc):
    rng = np.random.default_rng(11)
    for _ in range(50):
        leg = int(rng.integers(4))
        q = random_joint_angles(rng, desc)
        assert np.allclose(forward_kinematics(desc, leg, q), fk_oracle(desc, leg, q), atol=1e-12)


def test_jacobian_matches_symbolic_oracle(desc):
    rng = np.random.default_rng(12)
    for _ in range(50):
        leg = int(rng.integers(4))
        q = random_joint_angles(rng, desc)
        assert np.allclose(leg_jacobian(desc, leg, q), jacobian_oracle(desc, leg, q), atol=1e-12)


def test_jacobian_matches_finite_differences(desc):
    rng = np.random.default_rng(13)
    for _ in range(25):
        leg = int(rng.integers(4))
        q = random_joint_angles(rng, desc)
        J_fd = fd_jacobian(lambda v: forward_kinematics(desc, leg, v), q)
        assert np.allclose(leg_jacobian(desc, leg, q), J_fd, atol=1e-6)


def test_dynamics_terms_match_symbolic_oracle(desc):
    rng = np.random.default_rng(14)
    for _ in range(50):
        leg = int(rng.integers(4))
        state = random_joint_state(rng, desc)
        M, V, G = leg_dynamics_terms(desc, leg, state)
        M_o, V_o, G_o = dynamics_oracle(desc, leg, state.q, state.qdot)
        assert np.allclose(M, M_o, atol=1e-10)
        assert np.allclose(V, V_o, atol=1e-10)
        assert np.allclose(G, G_o, atol=1e-10)


def test_gravity_vector_is_potential_energy_gradient(desc):
    rng = np.random.default_rng(15)
    for _ in range(25):
        leg = int(rng.integers(4))
        q = random_joint_angles(rng, desc)
        _, _, G = leg_dynamics_terms(desc, leg, JointState(q, np.zeros(3)))
        G_fd = fd_gradient(lambda v: potential_energy(desc, leg, v), q)
        assert np.allclose(G, G_fd, atol=1e-6)


def test_mass_matrix_symmetric_positive_definite(desc):
    rng = np.random.default_rng(16)
    for _ in range(20):
        leg = int(rng.integers(4))
        state = random_joint_state(rng, desc)
        M, _, _ = leg_dynamics_terms(desc, leg, state)
        assert np.allclose(M, M.T, atol=1e-12)
        assert np.linalg.eigvalsh(M).min() > 0


def test_velocity_term_vanishes_at_rest(desc):
    rng = np.random.default_rng(17)
    q = random_joint_angles(rng, desc)
    _, V, _ = leg_dynamics_terms(desc, 2, JointState(q, np.zeros(3)))
    assert np.allclose(V, 0.0, atol=1e-14)


def test_ik_reaches_any_pose_in_the_limit_box(desc):
    rng = np.random.default_rng(18)
    for _ in range(100):
        leg = int(rng.integers(4))
        q = random_joint_angles(rng, desc)
        p = forward_kinematics(desc, leg, q)
        q_rec = inverse_kinematics(desc, leg, p)
        assert np.allclose(forward_kinematics(desc, leg, q_rec), p, atol=1e-9)


def test_ik_fk_round_trip_in_operating_region(desc):
    # foot below the hip: the abduction branch is unique there, so the exact
    # joint angles come back, not just the foot position
    rng = np.random.default_rng(21)
    lo = np.array([-0.6, -0.3, -2.3])
    hi = np.array([0.6, 0.9, -0.5])
    for _ in range(100):
        leg = int(rng.integers(4))
        q = rng.uniform(lo, hi)
        p = forward_kinematics(desc, leg, q)
        q_rec = inverse_kinematics(desc, leg, p)
        assert np.allclose(q_rec, q, atol=1e-8)


def test_ik_rejects_unreachable_targets(desc):
    with pytest.raises(UnreachableTargetError):
        inverse_kinematics(desc, 0, desc.hip_offsets[0] + np.array([0.0, 0.0, -1.0]))
    with pytest.raises(UnreachableTargetError):
        # directly on the abduction axis, inside the offset cylinder
        inverse_kinematics(desc, 0, desc.hip_offsets[0] + np.array([0.01, 0.0, 0.0]))


def test_operational_mass_is_task_space_inverse(desc):
    rng = np.random.default_rng(19)
    for _ in range(20):
        leg = int(rng.integers(4))
        q = random_joint_angles(rng, desc)
        lam = operational_mass(desc, leg, q)
        J = leg_jacobian(desc, leg, q)
        M, _, _ = leg_dynamics_terms(desc, leg, JointState(q, np.zeros(3)))
        assert np.allclose(lam @ (J @ np.linalg.solve(M, J.T)), np.eye(3), atol=1e-8)


def test_operational_mass_raises_near_singularity(desc):
    q_straight = np.array([0.0, 0.0, -1e-9])  # knee locked out
    with pytest.raises(NearSingularityError):
        operational_mass(desc, 0, q_straight, cond_cap=1e3)
    lam = operational_mass_damped(desc, 0, q_straight)
    assert np.all(np.isfinite(lam))


def test_description_validation_rejects_bad_geometry():
    with pytest.raises(ValueError):
        RobotDescription(trunk_mass=-1.0)
    with pytest.raises(ValueError):
        RobotDescription(trunk_inertia=np.diag([-0.1, 0.2, 0.3]))
    bad_hips = RobotDescription().hip_offsets.copy()
    bad_hips[0, 1] = bad_hips[1, 1]  # two hips on the same side
    with pytest.raises(ValueError):
        RobotDescription(hip_offsets=bad_hips)
    bad_limits = RobotDescription().joint_limits.copy()
    bad_limits[1] = (2.0, -2.0)
    with pytest.raises(ValueError):
        RobotDescription(joint_limits=bad_limits)


def test_total_mass_includes_legs(desc):
    assert desc.total_mass == pytest.approx(desc.trunk_mass + 4 * sum((0.5, 0.7, 0.2)))
    assert 0 <= desc.min_reach < desc.max_reach


def test_rpy_matrix_composition():
    r, p, y = 0.3, -0.5, 1.1
    assert np.allclose(rpy_matrix(np.array([r, p, y])), rot_z(y) @ rot_y(p) @ rot_x(r), atol=1e-14)


@given(
    st.floats(-1.2, 1.2), st.floats(-1.2, 1.2), st.floats(-3.0, 3.0)
)
@settings(max_examples=50, deadline=None)
def test_rotations_are_orthonormal(r, p, y):
    R = rpy_matrix(np.array([r, p, y]))
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_euler_rate_matrix_inverts_rpy_rates():
    theta = np.array([0.2, -0.4, 0.9])
    rates = np.array([0.5, -0.3, 0.8])
    omega = euler_rate_matrix(theta) @ rates
    assert np.allclose(rpy_rates_from_omega(theta, omega), rates, atol=1e-12)


def test_standing_angles_place_feet_below_hips(desc):
    for leg, q in enumerate(standing_joint_angles(desc)):
        p = forward_kinematics(desc, leg, q)
        expected = desc.hip_offsets[leg] + np.array([0.0, 0.0, -desc.default_height])
        assert np.allclose(p, expected, atol=1e-9)
        assert np.all(q >= desc.joint_limits[:, 0]) and np.all(q <= desc.joint_limits[:, 1])


def test_body_state_vector_round_trip():
    rng = np.random.default_rng(20)
    vec = rng.normal(size=12)
    body = BodyState.from_vector(vec)
    assert np.allclose(body.as_vector(), vec)
    assert np.allclose(body.rotation(), rpy_matrix(vec[:3]))
