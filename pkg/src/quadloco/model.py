"""Quadruped kinematics and per-leg dynamics.

Leg order is FR, FL, RR, RL. Each leg is a 3-DoF chain: abduction about the
body x axis at the hip mount, then hip pitch and knee about the (abducted)
y axis. At q = (0, 0, 0) the leg hangs fully stretched straight down, foot at
hip_offset + (0, side * abduction_offset, -(thigh_length + calf_length)).
Positive hip pitch swings the foot backward (-x); the knee angle is negative
on the knee-backward branch that inverse_kinematics selects.

All leg quantities are expressed in the body frame. Link masses are point
masses: abduction link at its midpoint, thigh at its midpoint, calf mass at
0.4 of the calf length below the knee (battery/actuator mass sits high).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LEG_NAMES = ("FR", "FL", "RR", "RL")
LEG_FR, LEG_FL, LEG_RR, LEG_RL = range(4)
# diagonal pairs used by the trot gait
DIAGONAL_PAIRS = (frozenset({LEG_FR, LEG_RL}), frozenset({LEG_FL, LEG_RR}))
# left legs (FL, RL) carry the abduction link in +y, right legs in -y
LEG_SIDE_SIGN = (-1.0, 1.0, -1.0, 1.0)

GRAVITY = 9.81


class UnreachableTargetError(ValueError):
    """Foot target outside the kinematic reach of the leg."""


class NearSingularityError(RuntimeError):
    """Jacobian too ill-conditioned for the requested operation."""


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_matrix(theta: np.ndarray) -> np.ndarray:
    """Body-to-world rotation from roll/pitch/yaw (R = Rz Ry Rx)."""
    return rot_z(theta[2]) @ rot_y(theta[1]) @ rot_x(theta[0])


def euler_rate_matrix(theta: np.ndarray) -> np.ndarray:
    """Maps rpy rates to the world angular velocity: w = T(theta) @ theta_dot."""
    roll, pitch, yaw = theta
    # columns: Rz Ry ex, Rz ey, ez
    cz, sz = math.cos(yaw), math.sin(yaw)
    cy, sy = math.cos(pitch), math.sin(pitch)
    return np.array(
        [
            [cz * cy, -sz, 0.0],
            [sz * cy, cz, 0.0],
            [-sy, 0.0, 1.0],
        ]
    )


def rpy_rates_from_omega(theta: np.ndarray, omega_world: np.ndarray) -> np.ndarray:
    return np.linalg.solve(euler_rate_matrix(theta), omega_world)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class RobotDescription:
    """Geometry, masses and limits of the point-foot quadruped.

    The default robot is deliberately generic: a roughly 18 kg machine with
    0.25 m links. It is sized for plausibility, not to match any product.
    """

    trunk_mass: float = 12.0
    trunk_inertia: np.ndarray = field(
        default_factory=lambda: np.diag([0.11, 0.26, 0.31])
    )
    # abduction joint origins in the body frame, legs FR, FL, RR, RL
    hip_offsets: np.ndarray = field(
        default_factory=lambda: np.array(
            [
                [0.183, -0.12, 0.0],
                [0.183, 0.12, 0.0],
                [-0.183, -0.12, 0.0],
                [-0.183, 0.12, 0.0],
            ]
        )
    )
    abduction_offset: float = 0.02
    thigh_length: float = 0.25
    calf_length: float = 0.25
    # point masses: abduction link, thigh, calf
    link_masses: tuple[float, float, float] = (0.5, 0.7, 0.2)
    # per joint (abduction, hip pitch, knee): min/max angle, radians
    joint_limits: np.ndarray = field(
        default_factory=lambda: np.array([[-0.8, 0.8], [-1.2, 2.4], [-2.6, -0.08]])
    )
    torque_limit: float = 44.4
    default_height: float = 0.31
    foot_radius: float = 0.02

    def __post_init__(self) -> None:
        object.__setattr__(self, "trunk_inertia", np.asarray(self.trunk_inertia, float))
        object.__setattr__(self, "hip_offsets", np.asarray(self.hip_offsets, float))
        object.__setattr__(self, "joint_limits", np.asarray(self.joint_limits, float))
        self.validate()

    def validate(self) -> None:
        if self.trunk_mass <= 0 or min(self.link_masses) <= 0:
            raise ValueError("all masses must be strictly positive")
        for name in ("abduction_offset", "thigh_length", "calf_length",
                     "torque_limit", "default_height", "foot_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        ti = self.trunk_inertia
        if ti.shape != (3, 3) or not np.allclose(ti, ti.T):
            raise ValueError("trunk_inertia must be symmetric 3x3")
        if np.any(np.linalg.eigvalsh(ti) <= 0):
            raise ValueError("trunk_inertia must be positive definite")
        if self.hip_offsets.shape != (4, 3):
            raise ValueError("hip_offsets must be 4x3")
        # mirror symmetry across the xz plane: FR/FL and RR/RL pair up
        mirrored = self.hip_offsets * np.array([1.0, -1.0, 1.0])
        if not np.allclose(mirrored[[1, 0, 3, 2]], self.hip_offsets, atol=1e-12):
            raise ValueError("hip_offsets must be mirror-symmetric in y")
        jl = self.joint_limits
        if jl.shape != (3, 2) or np.any(jl[:, 0] >= jl[:, 1]):
            raise ValueError("joint_limits must be 3x2 with min < max")

    @property
    def total_mass(self) -> float:
        return self.trunk_mass + 4.0 * sum(self.link_masses)

    @property
    def max_reach(self) -> float:
        return self.thigh_length + self.calf_length

    @property
    def min_reach(self) -> float:
        return abs(self.thigh_length - self.calf_length)


@dataclass
class JointState:
    """Angles and velocities of one leg, (abduction, hip pitch, knee)."""

    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, float).reshape(3)
        self.qdot = np.asarray(self.qdot, float).reshape(3)

    def copy(self) -> "JointState":
        return JointState(self.q.copy(), self.qdot.copy())


@dataclass
class BodyState:
    """Trunk state: rpy angles, position, world angular velocity, velocity."""

    theta: np.ndarray
    r: np.ndarray
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, float).reshape(3)
        self.r = np.asarray(self.r, float).reshape(3)
        self.omega = np.asarray(self.omega, float).reshape(3)
        self.v = np.asarray(self.v, float).reshape(3)

    def copy(self) -> "BodyState":
        return BodyState(self.theta.copy(), self.r.copy(), self.omega.copy(), self.v.copy())

    def as_vector(self) -> np.ndarray:
        """12-vector (theta, r, omega, v); the order used by traces and MPC."""
        return np.concatenate([self.theta, self.r, self.omega, self.v])

    @staticmethod
    def from_vector(x: np.ndarray) -> "BodyState":
        x = np.asarray(x, float).reshape(12)
        return BodyState(x[0:3], x[3:6], x[6:9], x[9:12])

    def rotation(self) -> np.ndarray:
        return rpy_matrix(self.theta)


# ---------------------------------------------------------------------------
# chain-point kinematics
#
# Every point of interest on a leg (foot, link mass points) has the form
#   p(q) = hip_offset + Rx(q0) @ [ (0, ky, 0) + Ry(q1) u1 + Ry(q1+q2) u2 ]
# with u1, u2 along -z. The helpers below return position, Jacobian and,
# on request, the stacked second derivatives d2p/dqi dqj.
# ---------------------------------------------------------------------------


def _chain_point(
    desc: RobotDescription,
    leg: int,
    q: np.ndarray,
    ky: float,
    l1: float,
    l2: float,
    want_hessian: bool = False,
):
    q0, q1, q2 = q
    s1, c1 = math.sin(q1), math.cos(q1)
    s12, c12 = math.sin(q1 + q2), math.cos(q1 + q2)

    # planar (x, z) part hanging from the hip pitch axis
    wx = -l1 * s1 - l2 * s12
    wz = -l1 * c1 - l2 * c12
    w = np.array([wx, ky, wz])

    d1 = np.array([-l1 * c1 - l2 * c12, 0.0, l1 * s1 + l2 * s12])
    d2 = np.array([-l2 * c12, 0.0, l2 * s12])

    R = rot_x(q0)
    p = desc.hip_offsets[leg] + R @ w

    def K(u: np.ndarray) -> np.ndarray:
        # derivative generator of Rx: d/da Rx(a) u = Rx(a) K u
        return np.array([0.0, -u[2], u[1]])

    J = np.empty((3, 3))
    J[:, 0] = R @ K(w)
    J[:, 1] = R @ d1
    J[:, 2] = R @ d2

    if not want_hessian:
        return p, J, None

    # second planar derivatives
    d11 = np.array([l1 * s1 + l2 * s12, 0.0, l1 * c1 + l2 * c12])
    d12 = np.array([l2 * s12, 0.0, l2 * c12])
    K2w = np.array([0.0, -w[1], -w[2]])  # K @ K @ w

    H = np.empty((3, 3, 3))
    H[0, 0] = R @ K2w
    H[0, 1] = H[1, 0] = R @ K(d1)
    H[0, 2] = H[2, 0] = R @ K(d2)
    H[1, 1] = R @ d11
    H[1, 2] = H[2, 1] = R @ d12
    H[2, 2] = R @ d12
    return p, J, H


def leg_mass_points(desc: RobotDescription, leg: int):
    """(mass, ky, l1, l2) tuples describing the point-mass locations."""
    side = LEG_SIDE_SIGN[leg]
    ab = desc.abduction_offset
    m0, m1, m2 = desc.link_masses
    return (
        (m0, side * ab * 0.5, 0.0, 0.0),
        (m1, side * ab, desc.thigh_length * 0.5, 0.0),
        (m2, side * ab, desc.thigh_length, 0.4 * desc.calf_length),
    )


def forward_kinematics(desc: RobotDescription, leg: int, q: np.ndarray) -> np.ndarray:
    """Foot position in the body frame."""
    side = LEG_SIDE_SIGN[leg]
    p, _, _ = _chain_point(
        desc, leg, q, side * desc.abduction_offset, desc.thigh_length, desc.calf_length
    )
    return p


def leg_jacobian(desc: RobotDescription, leg: int, q: np.ndarray) -> np.ndarray:
    """3x3 Jacobian of the foot position w.r.t. the joint angles."""
    side = LEG_SIDE_SIGN[leg]
    _, J, _ = _chain_point(
        desc, leg, q, side * desc.abduction_offset, desc.thigh_length, desc.calf_length
    )
    return J


def inverse_kinematics(desc: RobotDescription, leg: int, p_body: np.ndarray) -> np.ndarray:
    """Joint angles reaching a body-frame foot target, knee-backward branch.

    Raises UnreachableTargetError when the target lies outside the reach
    annulus of the planar pair or closer to the abduction axis than the
    abduction link length.
    """
    d = np.asarray(p_body, float) - desc.hip_offsets[leg]
    side = LEG_SIDE_SIGN[leg]
    ab = desc.abduction_offset
    t, c = desc.thigh_length, desc.calf_length

    ryz_sq = d[1] * d[1] + d[2] * d[2]
    if ryz_sq < ab * ab - 1e-12:
        raise UnreachableTargetError(
            f"leg {LEG_NAMES[leg]}: target inside the abduction cylinder"
        )
    big_l = math.sqrt(max(ryz_sq - ab * ab, 0.0))

    ab_s = side * ab
    det = ab_s * ab_s + big_l * big_l
    if det < 1e-12:
        raise UnreachableTargetError(f"leg {LEG_NAMES[leg]}: target on the abduction axis")
    cos0 = (ab_s * d[1] - big_l * d[2]) / det
    sin0 = (big_l * d[1] + ab_s * d[2]) / det
    q0 = math.atan2(sin0, cos0)

    r_pl = math.hypot(d[0], big_l)
    if r_pl > t + c + 1e-9 or r_pl < abs(t - c) - 1e-9:
        raise UnreachableTargetError(
            f"leg {LEG_NAMES[leg]}: planar distance {r_pl:.4f} outside [{abs(t - c):.4f}, {t + c:.4f}]"
        )
    cos_knee = (r_pl * r_pl - t * t - c * c) / (2.0 * t * c)
    q2 = -math.acos(min(1.0, max(-1.0, cos_knee)))
    alpha = math.atan2(-d[0], big_l)
    cos_beta = (r_pl * r_pl + t * t - c * c) / (2.0 * t * r_pl)
    beta = math.acos(min(1.0, max(-1.0, cos_beta)))
    q1 = alpha + beta
    return np.array([q0, q1, q2])


def leg_dynamics_terms(
    desc: RobotDescription, leg: int, state: JointState
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mass matrix M(q), Coriolis vector V(q, qdot) and gravity vector G(q).

    Point-mass model: M = sum m_i Ji^T Ji, V = sum m_i Ji^T (qd^T Hi qd),
    G = g * sum m_i dz_i/dq. Gravity acts along body -z (flat-trunk
    approximation used by the swing controller).
    """
    q, qd = state.q, state.qdot
    M = np.zeros((3, 3))
    V = np.zeros(3)
    G = np.zeros(3)
    for mass, ky, l1, l2 in leg_mass_points(desc, leg):
        _, J, H = _chain_point(desc, leg, q, ky, l1, l2, want_hessian=True)
        M += mass * J.T @ J
        # Jdot @ qd = qd^T H qd (vector valued)
        jdot_qd = np.einsum("i,ijk,j->k", qd, H, qd)
        V += mass * J.T @ jdot_qd
        G += mass * GRAVITY * J[2, :]
    return M, V, G


def operational_mass(
    desc: RobotDescription, leg: int, q: np.ndarray, cond_cap: float = 1e6
) -> np.ndarray:
    """Task-space mass matrix (J M^-1 J^T)^-1 at the foot.

    Raises NearSingularityError when cond(J) exceeds cond_cap.
    """
    J = leg_jacobian(desc, leg, q)
    sv = np.linalg.svd(J, compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > cond_cap:
        raise NearSingularityError(
            f"leg {LEG_NAMES[leg]}: Jacobian condition {sv[0] / max(sv[-1], 1e-300):.2e} over cap"
        )
    M, _, _ = leg_dynamics_terms(desc, leg, JointState(q, np.zeros(3)))
    JMinvJt = J @ np.linalg.solve(M, J.T)
    lam = np.linalg.inv(JMinvJt)
    return 0.5 * (lam + lam.T)


def operational_mass_damped(
    desc: RobotDescription, leg: int, q: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Damped task-space mass (J M^-1 J^T + eps I)^-1; never raises."""
    J = leg_jacobian(desc, leg, q)
    M, _, _ = leg_dynamics_terms(desc, leg, JointState(q, np.zeros(3)))
    JMinvJt = J @ np.linalg.solve(M, J.T)
    lam = np.linalg.inv(JMinvJt + eps * np.eye(3))
    return 0.5 * (lam + lam.T)


def default_robot() -> RobotDescription:
    return RobotDescription()


def standing_joint_angles(desc: RobotDescription, height: float | None = None) -> list[np.ndarray]:
    """Joint angles placing every foot directly below its abduction origin."""
    h = desc.default_height if height is None else height
    out = []
    for leg in range(4):
        target = desc.hip_offsets[leg] + np.array([0.0, 0.0, -h])
        out.append(inverse_kinematics(desc, leg, target))
    return out
