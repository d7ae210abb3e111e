"""Independent reference implementations used to check the library.

Everything here is derived symbolically (sympy) or by brute force, never by
calling the code under test: kinematics come from differentiating the
symbolic chain, dynamics from the Lagrangian terms of the point-mass model,
and QP solutions from enumerating active sets. Slow and simple on purpose.
"""
from __future__ import annotations

from functools import lru_cache
from itertools import combinations

import numpy as np
import sympy as sp

from quadloco.model import LEG_SIDE_SIGN, RobotDescription, leg_mass_points

# ---------------------------------------------------------------------------
# symbolic leg chain
# ---------------------------------------------------------------------------


@lru_cache(maxsize=1)
def _chain_functions():
    """Lambdified position/Jacobian/Jdot/potential for a generic chain point.

    The chain point is parameterized by (ky, l1, l2): an offset ky along the
    abducted y axis, l1 along the thigh direction and l2 along the calf
    direction. All leg quantities (foot, link mass points) are instances.
    """
    q0, q1, q2 = sp.symbols("q0 q1 q2", real=True)
    qd0, qd1, qd2 = sp.symbols("qd0 qd1 qd2", real=True)
    ky, l1, l2 = sp.symbols("ky l1 l2", real=True)

    rx = sp.Matrix(
        [
            [1, 0, 0],
            [0, sp.cos(q0), -sp.sin(q0)],
            [0, sp.sin(q0), sp.cos(q0)],
        ]
    )

    def ry(a):
        return sp.Matrix(
            [
                [sp.cos(a), 0, sp.sin(a)],
                [0, 1, 0],
                [-sp.sin(a), 0, sp.cos(a)],
            ]
        )

    p = rx * (
        sp.Matrix([0, ky, 0])
        + ry(q1) * sp.Matrix([0, 0, -l1])
        + ry(q1 + q2) * sp.Matrix([0, 0, -l2])
    )
    qv = sp.Matrix([q0, q1, q2])
    qdv = sp.Matrix([qd0, qd1, qd2])
    J = p.jacobian(qv)
    Jdot = sp.zeros(3, 3)
    for i in range(3):
        Jdot += sp.diff(J, qv[i]) * qdv[i]

    args_q = (q0, q1, q2, ky, l1, l2)
    args_qd = (q0, q1, q2, qd0, qd1, qd2, ky, l1, l2)
    return (
        sp.lambdify(args_q, p, "numpy"),
        sp.lambdify(args_q, J, "numpy"),
        sp.lambdify(args_qd, Jdot, "numpy"),
    )


def chain_point_oracle(q: np.ndarray, ky: float, l1: float, l2: float) -> np.ndarray:
    f_p, _, _ = _chain_functions()
    return np.asarray(f_p(q[0], q[1], q[2], ky, l1, l2), float).reshape(3)


def fk_oracle(desc: RobotDescription, leg: int, q: np.ndarray) -> np.ndarray:
    side = LEG_SIDE_SIGN[leg]
    p = chain_point_oracle(q, side * desc.abduction_offset, desc.thigh_length, desc.calf_length)
    return desc.hip_offsets[leg] + p


def jacobian_oracle(desc: RobotDescription, leg: int, q: np.ndarray) -> np.ndarray:
    _, f_J, _ = _chain_functions()
    side = LEG_SIDE_SIGN[leg]
    return np.asarray(
        f_J(q[0], q[1], q[2], side * desc.abduction_offset, desc.thigh_length, desc.calf_length),
        float,
    ).reshape(3, 3)


def dynamics_oracle(
    desc: RobotDescription, leg: int, q: np.ndarray, qd: np.ndarray, gravity: float = 9.81
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Point-mass M, V, G from the symbolic chain derivatives."""
    _, f_J, f_Jd = _chain_functions()
    M = np.zeros((3, 3))
    V = np.zeros(3)
    G = np.zeros(3)
    for mass, ky, l1, l2 in leg_mass_points(desc, leg):
        J = np.asarray(f_J(q[0], q[1], q[2], ky, l1, l2), float).reshape(3, 3)
        Jd = np.asarray(
            f_Jd(q[0], q[1], q[2], qd[0], qd[1], qd[2], ky, l1, l2), float
        ).reshape(3, 3)
        M += mass * J.T @ J
        V += mass * J.T @ (Jd @ qd)
        G += mass * gravity * J[2, :]
    return M, V, G


def potential_energy(desc: RobotDescription, leg: int, q: np.ndarray, gravity: float = 9.81) -> float:
    """U(q) = g * sum_i m_i z_i(q), body frame. G should equal dU/dq."""
    u = 0.0
    for mass, ky, l1, l2 in leg_mass_points(desc, leg):
        z = chain_point_oracle(q, ky, l1, l2)[2]
        u += mass * gravity * z
    return u


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def fd_jacobian(f, x: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    """Central-difference Jacobian of a vector function."""
    x = np.asarray(x, float)
    y0 = np.atleast_1d(np.asarray(f(x), float))
    out = np.zeros((y0.size, x.size))
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        out[:, i] = (np.atleast_1d(f(xp)) - np.atleast_1d(f(xm))) / (2 * eps)
    return out


def fd_gradient(f, x: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    return fd_jacobian(lambda v: np.array([f(v)]), x, eps).reshape(-1)


# ---------------------------------------------------------------------------
# brute-force QP reference
# ---------------------------------------------------------------------------


def enumerate_qp(H: np.ndarray, g: np.ndarray, A: np.ndarray, b: np.ndarray,
                 tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Global optimum of a strictly convex inequality QP by trying every
    active set. Exponential; keep m small."""
    n = g.shape[0]
    m = b.shape[0]
    best_x, best_cost = None, np.inf
    for k in range(0, min(m, n) + 1):
        for subset in combinations(range(m), k):
            Aw = A[list(subset)]
            kkt = np.zeros((n + k, n + k))
            kkt[:n, :n] = H
            kkt[:n, n:] = Aw.T
            kkt[n:, :n] = Aw
            rhs = np.concatenate([-g, b[list(subset)]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if m and (A @ x - b).max() > tol:
                continue
            if k and lam.min() < -tol:
                continue
            cost = 0.5 * x @ H @ x + g @ x
            if cost < best_cost - 1e-15:
                best_cost, best_x = float(cost), x
    if best_x is None:
        raise ValueError("no KKT point found; problem infeasible?")
    return best_x, best_cost


def random_feasible_qp(rng: np.random.Generator, n: int, m: int):
    """Strictly convex QP with a guaranteed interior feasible point."""
    B = rng.normal(size=(n, n))
    H = B @ B.T + n * np.eye(n)
    g = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    x_feas = rng.normal(size=n)
    slack = rng.uniform(0.1, 1.0, size=m)
    b = A @ x_feas + slack
    return H, g, A, b
