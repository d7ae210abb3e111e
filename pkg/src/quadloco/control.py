"""Leg controllers: task-space swing tracking and QP-based stance forces.

Swing legs run an operational-space law in the body frame: Jacobian-
transposed PD on foot position/velocity plus a task-space-mass feedforward
and gravity/velocity-product compensation. Stance legs apply the ground
reaction forces chosen by a receding-horizon controller on the yaw-
linearized single-rigid-body model; each leg maps its world-frame force to
joint torques through J^T and the body yaw rotation.

The receding-horizon problem condenses into one dense strictly convex QP
over the stacked stance forces. solve_qp is a primal active-set method with
deterministic lowest-index pivoting; identical inputs give identical
solutions, iteration counts included.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    BodyState,
    JointState,
    RobotDescription,
    forward_kinematics,
    leg_dynamics_terms,
    leg_jacobian,
    operational_mass_damped,
    rot_z,
    skew,
)


@dataclass
class SwingGains:
    """Diagonal task-space gains for the swing-leg tracker."""

    kp: tuple[float, float, float] = (700.0, 700.0, 700.0)
    kd: tuple[float, float, float] = (15.0, 15.0, 15.0)

    def __post_init__(self) -> None:
        if min(self.kp) < 0 or min(self.kd) < 0:
            raise ValueError("gains must be non-negative")


@dataclass
class MpcConfig:
    horizon: int = 10
    mpc_dt: float = 0.03
    # state weights, order (roll, pitch, yaw, x, y, z, wx, wy, wz, vx, vy, vz)
    q_weights: tuple[float, ...] = (
        250.0, 250.0, 150.0,
        10.0, 10.0, 900.0,
        1.0, 1.0, 2.0,
        25.0, 25.0, 40.0,
    )
    r_weight: float = 1e-5
    friction: float = 0.6
    fz_min: float = 0.0
    fz_max: float = 220.0

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.mpc_dt <= 0:
            raise ValueError("mpc_dt must be positive")
        if len(self.q_weights) != 12 or min(self.q_weights) < 0:
            raise ValueError("q_weights must be 12 non-negative values")
        if self.r_weight <= 0:
            raise ValueError("r_weight must be strictly positive")
        if self.friction < 0:
            raise ValueError("friction must be >= 0")
        if self.fz_max <= self.fz_min:
            raise ValueError("fz_max must exceed fz_min")


class InfeasibleScheduleError(ValueError):
    """Contact schedule has no stance leg anywhere in the horizon."""


class QpMaxIterationsError(RuntimeError):
    """Active-set loop failed to converge within the iteration cap."""


# ---------------------------------------------------------------------------
# swing and stance torque maps
# ---------------------------------------------------------------------------


def swing_torque(
    desc: RobotDescription,
    leg: int,
    state: JointState,
    p_ref: np.ndarray,
    v_ref: np.ndarray,
    a_ref: np.ndarray,
    gains: SwingGains,
) -> np.ndarray:
    """Task-space swing tracking torque for one leg (body-frame references).

    tau = J^T [Kp (p_ref - p) + Kd (v_ref - v)] + J^T Lambda a_ref + V + G,
    clamped to the actuator limit. Lambda is the damped task-space mass.
    """
    q = state.q
    J = leg_jacobian(desc, leg, q)
    p_cur = forward_kinematics(desc, leg, q)
    v_cur = J @ state.qdot
    M, V, G = leg_dynamics_terms(desc, leg, state)
    lam = operational_mass_damped(desc, leg, q)
    kp = np.asarray(gains.kp, float)
    kd = np.asarray(gains.kd, float)
    f_task = kp * (np.asarray(p_ref, float) - p_cur) + kd * (np.asarray(v_ref, float) - v_cur)
    tau = J.T @ f_task + J.T @ (lam @ np.asarray(a_ref, float)) + V + G
    return np.clip(tau, -desc.torque_limit, desc.torque_limit)


def stance_torque(
    desc: RobotDescription, leg: int, state: JointState, yaw: float, f_world: np.ndarray
) -> np.ndarray:
    """Joint torques realizing a commanded ground reaction force.

    f_world is the reaction the ground should exert on the foot (world
    frame, +z up). The motors supply tau = V + G - J^T Rz^T f: the leg's
    own gravity and velocity terms are fed forward so the realized contact
    force matches the command instead of carrying a leg-weight bias.
    Torques are clamped to the actuator limit.
    """
    J = leg_jacobian(desc, leg, state.q)
    _, V, G = leg_dynamics_terms(desc, leg, state)
    f_body = rot_z(yaw).T @ np.asarray(f_world, float)
    return np.clip(V + G - J.T @ f_body, -desc.torque_limit, desc.torque_limit)


# ---------------------------------------------------------------------------
# dense QP and its active-set solver
# ---------------------------------------------------------------------------


@dataclass
class QpProblem:
    """min 1/2 x^T H x + g^T x  s.t.  A x <= b, with H symmetric PD."""

    H: np.ndarray
    g: np.ndarray
    A: np.ndarray
    b: np.ndarray
    # optional bookkeeping for MPC problems
    var_map: list[tuple[int, int]] = field(default_factory=list)  # (step, leg) per force
    x0: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.g.shape[0]

    @property
    def m(self) -> int:
        return self.b.shape[0]


@dataclass
class QpSolution:
    x: np.ndarray
    cost: float
    iterations: int
    active_set: tuple[int, ...]
    kkt_residual: float
    max_violation: float


def _project_feasible(x: np.ndarray, A: np.ndarray, b: np.ndarray, max_sweeps: int = 200) -> np.ndarray | None:
    """Cyclic projection onto the half-space intersection; None on failure."""
    if A.shape[0] == 0:
        return x
    x = x.copy()
    row_sq = np.einsum("ij,ij->i", A, A)
    for _ in range(max_sweeps):
        viol = A @ x - b
        worst = float(viol.max())
        if worst <= 1e-10:
            return x
        for i in np.nonzero(viol > 1e-10)[0]:
            if row_sq[i] > 0:
                x -= ((A[i] @ x - b[i]) / row_sq[i]) * A[i]
    viol = A @ x - b
    return x if float(viol.max()) <= 1e-8 else None


def solve_qp(problem: QpProblem, x0: np.ndarray | None = None, max_iter: int | None = None) -> QpSolution:
    """Primal active-set method for a strictly convex inequality QP.

    Deterministic: blocking constraints and multiplier drops both break ties
    by the lowest constraint index, and the working set is rebuilt from
    scratch each call, so identical problems yield identical iterates. Warm
    starting passes the previous solution as x0; it is projected into the
    feasible set before the iteration begins.
    """
    H, g, A, b = problem.H, problem.g, problem.A, problem.b
    n, m = problem.n, problem.m
    if max_iter is None:
        max_iter = 50 * (n + m + 1)

    if x0 is None and problem.x0 is not None:
        x0 = problem.x0
    if x0 is None:
        x0 = np.linalg.solve(H, -g)
    x = _project_feasible(np.asarray(x0, float).reshape(n), A, b)
    if x is None:
        x = _project_feasible(np.zeros(n), A, b)
    if x is None:
        raise QpMaxIterationsError("could not find a feasible starting point")

    work: list[int] = []
    in_work = np.zeros(m, dtype=bool)
    for it in range(1, max_iter + 1):
        grad = H @ x + g
        if work:
            Aw = A[work]
            k = len(work)
            kkt = np.zeros((n + k, n + k))
            kkt[:n, :n] = H
            kkt[:n, n:] = Aw.T
            kkt[n:, :n] = Aw
            rhs = np.concatenate([-grad, np.zeros(k)])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                # degenerate working set (dependent normals): the system is
                # still consistent, take the minimum-norm solution
                sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            p, lam = sol[:n], sol[n:]
        else:
            p = np.linalg.solve(H, -grad)
            lam = np.zeros(0)

        # scale-aware convergence: the Newton decrement is immune to the
        # gradient-roundoff amplification that a raw step norm suffers in
        # small-curvature directions
        cost = 0.5 * x @ H @ x + g @ x
        decrement = 0.5 * abs(p @ H @ p)
        if decrement <= 1e-14 * (1.0 + abs(cost)):
            if work and lam.min(initial=0.0) < -1e-9:
                # drop the most negative multiplier, lowest index on ties
                order = sorted(range(len(work)), key=lambda i: (lam[i], work[i]))
                idx = work.pop(order[0])
                in_work[idx] = False
                continue
            active = tuple(sorted(work))
            lam_full = np.zeros(m)
            for i, idx in enumerate(work):
                lam_full[idx] = lam[i]
            stat = grad + (A.T @ lam_full if m else 0.0)
            viol = (A @ x - b).max() if m else 0.0
            return QpSolution(
                x, float(cost), it, active, float(np.abs(stat).max(initial=0.0)), float(max(viol, 0.0))
            )

        # step length to the nearest blocking constraint (lowest index on ties)
        alpha = 1.0
        blocker = -1
        if m:
            ap_all = A @ p
            resid = b - A @ x
            for i in range(m):
                if in_work[i] or ap_all[i] <= 1e-12:
                    continue
                ai = resid[i] / ap_all[i]
                if ai < alpha - 1e-12:
                    alpha = max(ai, 0.0)
                    blocker = i
        x = x + alpha * p
        if blocker >= 0:
            work.append(blocker)
            in_work[blocker] = True

    raise QpMaxIterationsError(f"no convergence in {max_iter} iterations")


# ---------------------------------------------------------------------------
# receding-horizon stance force problem
# ---------------------------------------------------------------------------

N_STATES = 13  # (theta, r, omega, v, gravity)


def _srb_matrices(
    yaw: float,
    r_com: np.ndarray,
    foot_pos_world: np.ndarray,
    stance: np.ndarray,
    desc: RobotDescription,
    gravity: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time dynamics about the current yaw; B has one 3-column
    block per stance leg in leg order."""
    Ac = np.zeros((N_STATES, N_STATES))
    Rz = rot_z(yaw)
    Ac[0:3, 6:9] = Rz.T
    Ac[3:6, 9:12] = np.eye(3)
    Ac[11, 12] = -1.0  # gravity state feeds vertical acceleration

    legs = [leg for leg in range(4) if stance[leg]]
    I_w = Rz @ desc.trunk_inertia @ Rz.T
    I_w_inv = np.linalg.inv(I_w)
    Bc = np.zeros((N_STATES, 3 * len(legs)))
    m = desc.total_mass
    for j, leg in enumerate(legs):
        col = 3 * j
        Bc[6:9, col : col + 3] = I_w_inv @ skew(foot_pos_world[leg] - r_com)
        Bc[9:12, col : col + 3] = np.eye(3) / m
    return Ac, Bc


def _discretize(Ac: np.ndarray, Bc: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order hold: Ac is nilpotent (Ac^3 = 0), so the series
    truncates."""
    A2 = Ac @ Ac
    Ad = np.eye(N_STATES) + Ac * dt + A2 * (dt * dt / 2.0)
    Bd = (np.eye(N_STATES) * dt + Ac * (dt * dt / 2.0) + A2 * (dt**3 / 6.0)) @ Bc
    return Ad, Bd


def build_mpc(
    body: BodyState,
    x_refs: list[BodyState],
    foot_pos_world: np.ndarray,
    schedule: np.ndarray,
    cfg: MpcConfig,
    desc: RobotDescription,
    gravity: float = 9.81,
) -> QpProblem:
    """Condense the horizon into one dense QP over stacked stance forces.

    schedule: horizon x 4 stance flags. Swing legs have no decision
    variables at their steps, so their forces are structurally zero.
    Constraints per stance force: fz bounds and the four-face friction
    pyramid |fx|,|fy| <= mu fz.
    """
    N = cfg.horizon
    schedule = np.asarray(schedule).reshape(N, 4)
    if schedule.sum() == 0:
        raise InfeasibleScheduleError("no stance legs anywhere in the horizon")
    if len(x_refs) != N:
        raise ValueError(f"need {N} reference samples, got {len(x_refs)}")

    yaw = float(body.theta[2])
    x0 = np.concatenate([body.as_vector(), [gravity]])

    # per-step input maps (A is shared: same yaw linearization over the horizon)
    Ac, _ = _srb_matrices(yaw, body.r, foot_pos_world, np.ones(4), desc, gravity)
    var_map: list[tuple[int, int]] = []
    Bd_steps: list[np.ndarray] = []
    Ad = None
    for k in range(N):
        _, Bc_k = _srb_matrices(yaw, body.r, foot_pos_world, schedule[k], desc, gravity)
        Ad, Bd_k = _discretize(Ac, Bc_k, cfg.mpc_dt)
        Bd_steps.append(Bd_k)
        for leg in range(4):
            if schedule[k, leg]:
                var_map.append((k, leg))
    n_vars = 3 * len(var_map)

    # condensation: X_k = Ad^k x0 + sum_j Ad^(k-1-j) Bd_j u_j
    S = np.zeros((N * N_STATES, n_vars))
    M_free = np.zeros((N * N_STATES, N_STATES))
    Ak = np.eye(N_STATES)
    powers = [Ak]
    for _ in range(N):
        Ak = Ad @ Ak
        powers.append(Ak)
    col = 0
    col_of_step = []
    for k in range(N):
        col_of_step.append(col)
        col += Bd_steps[k].shape[1]
    for k in range(N):
        M_free[k * N_STATES : (k + 1) * N_STATES] = powers[k + 1]
        for j in range(k + 1):
            blk = powers[k - j] @ Bd_steps[j]
            cj = col_of_step[j]
            S[k * N_STATES : (k + 1) * N_STATES, cj : cj + blk.shape[1]] = blk

    q_diag = np.concatenate([np.asarray(cfg.q_weights, float), [0.0]])
    Qbar = np.tile(q_diag, N)
    ref_stack = np.concatenate([np.concatenate([xr.as_vector(), [gravity]]) for xr in x_refs])
    err0 = M_free @ x0 - ref_stack

    H = 2.0 * (S.T * Qbar) @ S
    H[np.diag_indices_from(H)] += 2.0 * cfg.r_weight
    g = 2.0 * S.T @ (Qbar * err0)
    H = 0.5 * (H + H.T)

    # constraints: -fz <= -fz_min, fz <= fz_max, +-fx - mu fz <= 0, +-fy - mu fz <= 0
    mu = cfg.friction
    rows = 6 * len(var_map)
    A = np.zeros((rows, n_vars))
    b = np.zeros(rows)
    for i in range(len(var_map)):
        cx, cy, cz = 3 * i, 3 * i + 1, 3 * i + 2
        r0 = 6 * i
        A[r0 + 0, cz] = -1.0
        b[r0 + 0] = -cfg.fz_min
        A[r0 + 1, cz] = 1.0
        b[r0 + 1] = cfg.fz_max
        A[r0 + 2, cx] = 1.0
        A[r0 + 2, cz] = -mu
        A[r0 + 3, cx] = -1.0
        A[r0 + 3, cz] = -mu
        A[r0 + 4, cy] = 1.0
        A[r0 + 4, cz] = -mu
        A[r0 + 5, cy] = -1.0
        A[r0 + 5, cz] = -mu

    # feasible start: weight shared over stance legs, vertical only
    x_start = np.zeros(n_vars)
    weight = desc.total_mass * gravity
    for k in range(N):
        n_st = int(schedule[k].sum())
        if n_st == 0:
            continue
        fz = min(max(weight / n_st, cfg.fz_min), cfg.fz_max)
        for i, (step, _) in enumerate(var_map):
            if step == k:
                x_start[3 * i + 2] = fz

    return QpProblem(H, g, A, b, var_map=var_map, x0=x_start)


def first_step_forces(problem: QpProblem, solution: QpSolution) -> np.ndarray:
    """4x3 world forces for the first horizon step (zero for swing legs)."""
    forces = np.zeros((4, 3))
    for i, (step, leg) in enumerate(problem.var_map):
        if step == 0:
            forces[leg] = solution.x[3 * i : 3 * i + 3]
    return forces
