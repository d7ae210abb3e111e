"""Rigid-trunk quadruped simulator with penalty ground contact.

The trunk is a single rigid body carrying the robot's total mass and the
trunk inertia; it is driven by ground reaction forces at the feet, gravity
and scheduled disturbance forces. Legs are torque-driven 3-DoF chains hung
on the moving base ("articulated-legs" fidelity) or follow planner reference
samples exactly ("kinematic-legs" fidelity, used by geometry tests).

Ground is the z = 0 plane. Normal contact is a one-sided spring-damper;
tangential contact is a viscous stick model clamped to the Coulomb disc,
with the friction coefficient looked up from x-interval patches.

Trunk integration is semi-implicit Euler with a trapezoidal position update
(exact for constant acceleration). Leg integration is semi-implicit Euler
with the viscous contact terms evaluated at the post-step joint velocity;
the resulting force is the one applied to the trunk, so both sides of the
contact see the same reaction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    BodyState,
    JointState,
    RobotDescription,
    forward_kinematics,
    inverse_kinematics,
    leg_dynamics_terms,
    leg_jacobian,
    rpy_matrix,
    rpy_rates_from_omega,
    UnreachableTargetError,
)

ARTICULATED_LEGS = "articulated-legs"
KINEMATIC_LEGS = "kinematic-legs"


class NumericalBlowupError(RuntimeError):
    """State magnitude exceeded the configured blow-up limit."""


@dataclass(frozen=True)
class FrictionPatch:
    """Friction coefficient mu on the ground strip x_min <= x < x_max."""

    x_min: float
    x_max: float
    mu: float

    def __post_init__(self) -> None:
        if self.x_max <= self.x_min:
            raise ValueError("friction patch needs x_min < x_max")
        if self.mu < 0:
            raise ValueError("friction coefficient must be >= 0")


@dataclass(frozen=True)
class Disturbance:
    """External trunk force (world frame, applied at the CoM) on a time window."""

    t_start: float
    duration: float
    force: tuple[float, float, float]

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError("disturbance duration must be positive")


@dataclass
class SimConfig:
    dt: float = 0.001
    gravity: float = 9.81
    contact_stiffness: float = 1e5
    contact_damping: float = 3e3
    tangential_stiffness: float = 1e4
    friction_default: float = 0.6
    friction_patches: tuple[FrictionPatch, ...] = ()
    fidelity: str = ARTICULATED_LEGS
    disturbances: tuple[Disturbance, ...] = ()
    blowup_limit: float = 1e6
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.gravity <= 0:
            raise ValueError("gravity must be positive")
        for name in ("contact_stiffness", "contact_damping", "tangential_stiffness"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.friction_default < 0:
            raise ValueError("friction_default must be >= 0")
        if self.fidelity not in (ARTICULATED_LEGS, KINEMATIC_LEGS):
            raise ValueError(f"unknown fidelity {self.fidelity!r}")
        if self.blowup_limit <= 0:
            raise ValueError("blowup_limit must be positive")


@dataclass
class WorldState:
    time: float
    body: BodyState
    legs: list[JointState]
    foot_world: np.ndarray  # 4x3
    contact_flags: np.ndarray  # 4 bools
    last_grf: np.ndarray  # 4x3, world frame

    def copy(self) -> "WorldState":
        return WorldState(
            self.time,
            self.body.copy(),
            [ls.copy() for ls in self.legs],
            self.foot_world.copy(),
            self.contact_flags.copy(),
            self.last_grf.copy(),
        )


def friction_at(cfg: SimConfig, x: float) -> float:
    for patch in cfg.friction_patches:
        if patch.x_min <= x < patch.x_max:
            return patch.mu
    return cfg.friction_default


def apply_disturbance(disturbances: tuple[Disturbance, ...], t: float) -> np.ndarray:
    """Sum of active disturbance forces at time t (world frame)."""
    f = np.zeros(3)
    for d in disturbances:
        if d.t_start <= t < d.t_start + d.duration:
            f += np.asarray(d.force, float)
    return f


def foot_world_position(desc: RobotDescription, body: BodyState, leg: int, q: np.ndarray) -> np.ndarray:
    return body.r + body.rotation() @ forward_kinematics(desc, leg, q)


def all_foot_world_positions(desc: RobotDescription, body: BodyState, legs: list[JointState]) -> np.ndarray:
    R = body.rotation()
    out = np.empty((4, 3))
    for leg in range(4):
        out[leg] = body.r + R @ forward_kinematics(desc, leg, legs[leg].q)
    return out


def foot_world_velocity(
    desc: RobotDescription, body: BodyState, leg: int, state: JointState
) -> np.ndarray:
    R = body.rotation()
    p_b = forward_kinematics(desc, leg, state.q)
    J = leg_jacobian(desc, leg, state.q)
    return body.v + np.cross(body.omega, R @ p_b) + R @ (J @ state.qdot)


def contact_forces(world: WorldState, cfg: SimConfig, desc: RobotDescription) -> np.ndarray:
    """Per-foot ground reaction forces, world frame, 4x3.

    Normal: f_n = max(0, -k*z - d*zdot) while z < 0, else 0.
    Tangential: viscous stick -k_t * v_t clamped to the Coulomb disc mu*f_n.
    """
    grf = np.zeros((4, 3))
    for leg in range(4):
        z = world.foot_world[leg, 2]
        if z >= 0.0:
            continue
        v_foot = foot_world_velocity(desc, world.body, leg, world.legs[leg])
        fn = max(0.0, -cfg.contact_stiffness * z - cfg.contact_damping * v_foot[2])
        if fn == 0.0:
            continue
        mu = friction_at(cfg, world.foot_world[leg, 0])
        ft = -cfg.tangential_stiffness * v_foot[:2]
        ft_norm = float(np.hypot(ft[0], ft[1]))
        cap = mu * fn
        if ft_norm > cap:
            ft *= cap / ft_norm
        grf[leg, 0] = ft[0]
        grf[leg, 1] = ft[1]
        grf[leg, 2] = fn
    return grf


def _check_blowup(body: BodyState, legs: list[JointState], limit: float) -> None:
    mags = [
        np.abs(body.r).max(),
        np.abs(body.v).max(),
        np.abs(body.omega).max(),
        np.abs(body.theta).max(),
    ]
    for ls in legs:
        mags.append(np.abs(ls.q).max())
        mags.append(np.abs(ls.qdot).max())
    if max(mags) > limit:
        raise NumericalBlowupError(f"state magnitude {max(mags):.3e} over {limit:.1e}")


def _articulated_velocity_update(
    world: WorldState,
    torques: np.ndarray,
    cfg: SimConfig,
    desc: RobotDescription,
    dist: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One semi-implicit velocity update of trunk and legs together.

    Solves for post-step velocities u' = (v, omega, qdot x 4) with the
    viscous contact forces evaluated at u'. With the documented stiffness
    and damping defaults an explicit evaluation diverges at 1 ms on both
    the low-inertia legs and the trunk yaw channel, so the coupled 18x18
    implicit solve is what makes those defaults integrable. It also applies
    one identical reaction force to trunk and leg, so momentum bookkeeping
    at the contact is exact.

    Feet whose stick-model solution separates (fz <= 0) are released, feet
    whose tangential force exceeds the Coulomb disc are re-solved with the
    capped tangential force held explicit. Both passes re-use the same
    linear system with adjusted terms, in deterministic order.

    Returns (v_new, omega_new, qdot_new 4x3, grf 4x3).
    """
    dt = cfg.dt
    body = world.body
    R = body.rotation()
    I_w = R @ desc.trunk_inertia @ R.T
    k, d, kt = cfg.contact_stiffness, cfg.contact_damping, cfg.tangential_stiffness

    mass_blocks = np.zeros((18, 18))
    mass_blocks[0:3, 0:3] = desc.total_mass * np.eye(3)
    mass_blocks[3:6, 3:6] = I_w
    bias_vec = np.zeros(18)
    bias_vec[0:3] = dist - np.array([0.0, 0.0, desc.total_mass * cfg.gravity])
    bias_vec[3:6] = -np.cross(body.omega, I_w @ body.omega)

    u0 = np.zeros(18)
    u0[0:3] = body.v
    u0[3:6] = body.omega

    foot_maps: list[np.ndarray | None] = [None] * 4
    elastic = np.zeros((4, 3))
    for leg in range(4):
        st = world.legs[leg]
        M, V, G = leg_dynamics_terms(desc, leg, st)
        sl = slice(6 + 3 * leg, 9 + 3 * leg)
        # small regularization keeps near-singular stretched legs integrable
        mass_blocks[sl, sl] = M + 1e-9 * np.eye(3)
        bias_vec[sl] = torques[leg] - V - G
        u0[sl] = st.qdot
        p_w = world.foot_world[leg]
        if p_w[2] < 0.0:
            Gmap = np.zeros((3, 18))
            Gmap[:, 0:3] = np.eye(3)
            Gmap[:, 3:6] = -_skew(p_w - body.r)
            Gmap[:, sl] = R @ leg_jacobian(desc, leg, st.q)
            foot_maps[leg] = Gmap
            elastic[leg, 2] = -k * p_w[2]

    # stick_mode: 2 = full viscous stick, 1 = slipping (capped tangential
    # explicit, normal damping implicit), 0 = released
    stick_mode = [2 if foot_maps[leg] is not None else 0 for leg in range(4)]
    slip_dir = [np.zeros(2) for _ in range(4)]
    grf = np.zeros((4, 3))

    for _ in range(8):  # each pass only demotes feet, so this terminates
        A = mass_blocks.copy()
        rhs = mass_blocks @ u0 + dt * bias_vec
        for leg in range(4):
            if stick_mode[leg] == 0:
                continue
            Gmap = foot_maps[leg]
            if stick_mode[leg] == 2:
                C = np.diag([kt, kt, d])
                f_fix = elastic[leg]
            else:
                C = np.diag([0.0, 0.0, d])
                mu = friction_at(cfg, world.foot_world[leg, 0])
                cap = mu * grf[leg, 2]
                f_fix = elastic[leg] + np.array(
                    [cap * slip_dir[leg][0], cap * slip_dir[leg][1], 0.0]
                )
            A += dt * (Gmap.T @ C @ Gmap)
            rhs += dt * (Gmap.T @ f_fix)
        u = np.linalg.solve(A, rhs)

        changed = False
        for leg in range(4):
            if stick_mode[leg] == 0:
                if foot_maps[leg] is not None:
                    grf[leg] = 0.0
                continue
            Gmap = foot_maps[leg]
            v_foot = Gmap @ u
            fz = elastic[leg, 2] - d * v_foot[2]
            if fz <= 0.0:
                stick_mode[leg] = 0
                grf[leg] = 0.0
                changed = True
                continue
            if stick_mode[leg] == 2:
                ft = -kt * v_foot[:2]
                mu = friction_at(cfg, world.foot_world[leg, 0])
                ft_norm = float(np.hypot(ft[0], ft[1]))
                if ft_norm > mu * fz:
                    stick_mode[leg] = 1
                    slip_dir[leg] = ft / ft_norm
                    grf[leg] = np.array([0.0, 0.0, fz])  # seeds the cap
                    changed = True
                    continue
                grf[leg] = np.array([ft[0], ft[1], fz])
            else:
                mu = friction_at(cfg, world.foot_world[leg, 0])
                grf[leg] = np.array(
                    [mu * fz * slip_dir[leg][0], mu * fz * slip_dir[leg][1], fz]
                )
        if not changed:
            break

    return u[0:3], u[3:6], u[6:18].reshape(4, 3), grf


def _skew(a: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -a[2], a[1]],
        [a[2], 0.0, -a[0]],
        [-a[1], a[0], 0.0],
    ])


def step(
    world: WorldState,
    torques: np.ndarray,
    cfg: SimConfig,
    desc: RobotDescription,
    refs=None,
    grf_override: np.ndarray | None = None,
) -> WorldState:
    """Advance one dt. Deterministic: same inputs give bit-identical outputs.

    torques: 4x3 joint torques (ignored in kinematic-legs fidelity).
    refs: ReferenceTick, required by kinematic-legs fidelity.
    grf_override: 4x3 world forces replacing the contact model; the legs are
    held pinned while it is active (test hook for equilibrium oracles).
    """
    if cfg.fidelity == KINEMATIC_LEGS:
        return _step_kinematic(world, cfg, desc, refs)

    dt = cfg.dt
    torques = np.clip(np.asarray(torques, float).reshape(4, 3),
                      -desc.torque_limit, desc.torque_limit)
    dist = apply_disturbance(cfg.disturbances, world.time)
    body = world.body

    if grf_override is not None:
        grf = np.asarray(grf_override, float).reshape(4, 3).copy()
        new_legs = [ls.copy() for ls in world.legs]
        m = desc.total_mass
        accel = (grf.sum(axis=0) + dist) / m - np.array([0.0, 0.0, cfg.gravity])
        torque_world = np.zeros(3)
        for leg in range(4):
            torque_world += np.cross(world.foot_world[leg] - body.r, grf[leg])
        R = body.rotation()
        I_w = R @ desc.trunk_inertia @ R.T
        omega_dot = np.linalg.solve(I_w, torque_world - np.cross(body.omega, I_w @ body.omega))
        v_new = body.v + accel * dt
        omega_new = body.omega + omega_dot * dt
    else:
        v_new, omega_new, qdot_new, grf = _articulated_velocity_update(
            world, torques, cfg, desc, dist
        )
        new_legs = []
        jl = desc.joint_limits
        for leg in range(4):
            qd = qdot_new[leg].copy()
            q_new = world.legs[leg].q + qd * dt
            for j in range(3):
                if q_new[j] < jl[j, 0]:
                    q_new[j] = jl[j, 0]
                    qd[j] = max(qd[j], 0.0)
                elif q_new[j] > jl[j, 1]:
                    q_new[j] = jl[j, 1]
                    qd[j] = min(qd[j], 0.0)
            new_legs.append(JointState(q_new, qd))

    r_new = body.r + 0.5 * (body.v + v_new) * dt
    theta_new = body.theta + rpy_rates_from_omega(body.theta, omega_new) * dt
    new_body = BodyState(theta_new, r_new, omega_new, v_new)

    foot_world = all_foot_world_positions(desc, new_body, new_legs)
    contact = foot_world[:, 2] <= 0.0
    _check_blowup(new_body, new_legs, cfg.blowup_limit)
    return WorldState(world.time + dt, new_body, new_legs, foot_world, contact, grf)


def _step_kinematic(world: WorldState, cfg: SimConfig, desc: RobotDescription, refs) -> WorldState:
    """Kinematic fidelity: trunk and swing feet adopt the reference samples,
    stance feet stay pinned where they touched down."""
    if refs is None:
        raise ValueError("kinematic-legs fidelity needs a ReferenceTick per step")
    dt = cfg.dt
    new_body = refs.body.copy()
    R = new_body.rotation()

    foot_world = world.foot_world.copy()
    new_legs = []
    for leg in range(4):
        if refs.contact[leg]:
            pass  # pinned: keep world position
        else:
            foot_world[leg] = new_body.r + R @ refs.p[leg]
        target_body = R.T @ (foot_world[leg] - new_body.r)
        try:
            q_new = inverse_kinematics(desc, leg, target_body)
        except UnreachableTargetError:
            q_new = world.legs[leg].q.copy()
        qd_new = (q_new - world.legs[leg].q) / dt
        new_legs.append(JointState(q_new, qd_new))

    contact = foot_world[:, 2] <= 1e-12
    _check_blowup(new_body, new_legs, cfg.blowup_limit)
    return WorldState(world.time + dt, new_body, new_legs, foot_world,
                      contact, np.zeros((4, 3)))


def default_world(desc: RobotDescription, height: float | None = None) -> WorldState:
    """Standing start: trunk level at the given height, feet below the hips."""
    h = desc.default_height if height is None else height
    body = BodyState(np.zeros(3), np.array([0.0, 0.0, h]), np.zeros(3), np.zeros(3))
    legs = []
    for leg in range(4):
        target = desc.hip_offsets[leg] + np.array([0.0, 0.0, -h])
        q = inverse_kinematics(desc, leg, target)
        legs.append(JointState(q, np.zeros(3)))
    foot_world = all_foot_world_positions(desc, body, legs)
    contact = foot_world[:, 2] <= 0.0
    return WorldState(0.0, body, legs, foot_world, contact, np.zeros((4, 3)))
