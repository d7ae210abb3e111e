"""Closed-loop driver wiring planner, controllers and simulator together.

Rates: the simulator steps at sim dt (default 1 kHz); the planner and leg
controllers tick every `control_every` sim steps (default 500 Hz); the
stance force problem re-solves every `mpc_every` control ticks (default
100 Hz) and additionally whenever the stance set changes, with the force
plan held between solves. A solver failure keeps the previous force plan
and is logged, never raised.

The runner also detects falls (trunk too low or too tilted) and converts
numerical blow-ups into a failed-run flag so sweeps keep going.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import sim as simcore
from .control import (
    InfeasibleScheduleError,
    MpcConfig,
    QpMaxIterationsError,
    QpProblem,
    QpSolution,
    SwingGains,
    build_mpc,
    first_step_forces,
    solve_qp,
    stance_torque,
    swing_torque,
)
from .metrics import MetricsReport, RunTrace, summarize_run
from .model import JointState, RobotDescription
from .planner import ALL_STANCE, Planner, PlannerParams, body_reference
from .sim import SimConfig, WorldState

FALL_HEIGHT = 0.12  # m
FALL_TILT = 0.6  # rad, roll or pitch

# commanded (vx, vy, yaw_rate) as a function of time
CommandProfile = Callable[[float], tuple[float, float, float]]


def constant_command(vx: float, vy: float = 0.0, yaw_rate: float = 0.0) -> CommandProfile:
    def profile(t: float) -> tuple[float, float, float]:
        return (vx, vy, yaw_rate)

    return profile


def piecewise_command(segments: list[tuple[float, float, float, float]]) -> CommandProfile:
    """segments: (t_start, vx, vy, yaw_rate), sorted by t_start; holds the
    last matching segment."""
    segs = sorted(segments, key=lambda s: s[0])

    def profile(t: float) -> tuple[float, float, float]:
        cur = (0.0, 0.0, 0.0)
        for t0, vx, vy, wz in segs:
            if t >= t0:
                cur = (vx, vy, wz)
            else:
                break
        return cur

    return profile


@dataclass
class RunResult:
    trace: RunTrace
    report: MetricsReport
    fell: bool
    failure: Optional[str]
    world: WorldState
    events: list[dict]
    mpc_log: list[dict]


class ClosedLoopRunner:
    def __init__(
        self,
        desc: RobotDescription,
        sim_cfg: SimConfig,
        params: PlannerParams,
        gait: str,
        mpc_cfg: MpcConfig | None = None,
        gains: SwingGains | None = None,
        control_every: int = 2,
        mpc_every: int = 5,
        command: CommandProfile | None = None,
        collect_mpc_log: bool = False,
        accel_limit: float = 1.0,
        yaw_accel_limit: float = 3.0,
        sway_amplitude: float = 0.012,
        sway_slew: float = 0.6,
    ):
        self.desc = desc
        self.sim_cfg = sim_cfg
        self.mpc_cfg = mpc_cfg or MpcConfig()
        self.gains = gains or SwingGains()
        self.control_every = control_every
        self.mpc_every = mpc_every
        self.command = command or constant_command(0.0)
        self.collect_mpc_log = collect_mpc_log
        self.accel_limit = accel_limit
        self.yaw_accel_limit = yaw_accel_limit
        self.sway_amplitude = sway_amplitude
        self.sway_slew = sway_slew

        self.planner = Planner(
            desc,
            params,
            gait=gait,
            control_dt=sim_cfg.dt * control_every,
            gravity=sim_cfg.gravity,
        )
        self.world = simcore.default_world(desc, height=params.body_height)
        self.forces = np.zeros((4, 3))
        self.torques = np.zeros((4, 3))
        self.last_solution: QpSolution | None = None
        self.last_stance: tuple | None = None
        self.tick_count = 0
        self.kinematic = sim_cfg.fidelity == simcore.KINEMATIC_LEGS
        self.mpc_log: list[dict] = []
        self.events: list[dict] = []
        self._refs = None
        self._v_slew = np.zeros(2)
        self._yaw_rate_slew = 0.0
        self._sway = 0.0

    # -- one control tick ----------------------------------------------------

    def control_tick(self) -> None:
        vx, vy, yaw_rate = self.command(self.world.time)
        # slew-limit the operator command so gait initiation and setpoint
        # steps are absorbed as finite accelerations, not velocity jumps
        dt_ctl = self.sim_cfg.dt * self.control_every
        dv = np.array([vx, vy]) - self._v_slew
        dv_max = self.accel_limit * dt_ctl
        self._v_slew = self._v_slew + np.clip(dv, -dv_max, dv_max)
        dw_max = self.yaw_accel_limit * dt_ctl
        self._yaw_rate_slew += float(np.clip(yaw_rate - self._yaw_rate_slew, -dw_max, dw_max))
        v_des = self._v_slew.copy()
        yaw_rate = self._yaw_rate_slew
        refs = self.planner.plan_step(self.world, v_des, yaw_rate)
        self._refs = refs
        self.events.extend(self.planner.drain_events())
        # trunk lean for three-legged support, slew-limited so side switches
        # ramp across the stance window instead of stepping the reference
        goal = self.sway_amplitude * self.planner.lateral_weave()
        step = self.sway_slew * dt_ctl
        self._sway += float(np.clip(goal - self._sway, -step, step))
        if self.kinematic:
            return

        stance_now = tuple(int(c) for c in refs.contact)
        need_solve = (self.tick_count % self.mpc_every == 0) or (stance_now != self.last_stance)
        self.tick_count += 1
        if need_solve:
            self._solve_forces(v_des, yaw_rate, refs)
            self.last_stance = stance_now

        torques = np.zeros((4, 3))
        yaw = float(self.world.body.theta[2])
        for leg in range(4):
            if refs.contact[leg]:
                torques[leg] = stance_torque(
                    self.desc, leg, self.world.legs[leg], yaw, self.forces[leg]
                )
            else:
                torques[leg] = swing_torque(
                    self.desc,
                    leg,
                    self.world.legs[leg],
                    refs.p[leg],
                    refs.v[leg],
                    refs.a[leg],
                    self.gains,
                )
        self.torques = torques

    def _solve_forces(self, v_des: np.ndarray, yaw_rate: float, refs) -> None:
        N = self.mpc_cfg.horizon
        schedule = self.planner.contact_horizon(N, self.mpc_cfg.mpc_dt)
        x_refs = body_reference(
            self.world.body, v_des, yaw_rate, N, self.mpc_cfg.mpc_dt, self.planner.params.body_height
        )
        if abs(self._sway) > 1e-6:
            yaw = float(self.world.body.theta[2])
            lat = np.array([-math.sin(yaw), math.cos(yaw)])
            for ref in x_refs:
                ref.r[:2] = ref.r[:2] + lat * self._sway
        # swinging feet enter the horizon at their planned landing spots, not
        # where they happened to be at liftoff
        feet = self.world.foot_world.copy()
        for leg, plan in self.planner.swing_plans.items():
            feet[leg] = plan.target_world
        try:
            problem = build_mpc(
                self.world.body,
                x_refs,
                feet,
                schedule,
                self.mpc_cfg,
                self.desc,
                gravity=self.sim_cfg.gravity,
            )
            warm = self.last_solution.x if (
                self.last_solution is not None and self.last_solution.x.shape == problem.g.shape
            ) else None
            solution = solve_qp(problem, x0=warm)
        except QpMaxIterationsError as err:
            self.mpc_log.append({"t": self.world.time, "status": "max-iterations", "detail": str(err)})
            return  # hold previous force plan
        except InfeasibleScheduleError as err:
            self.mpc_log.append({"t": self.world.time, "status": "infeasible-schedule", "detail": str(err)})
            return
        self.forces = first_step_forces(problem, solution)
        self.last_solution = solution
        if self.collect_mpc_log:
            self.mpc_log.append(
                {
                    "t": self.world.time,
                    "status": "ok",
                    "cost": solution.cost,
                    "iterations": solution.iterations,
                    "kkt_residual": solution.kkt_residual,
                    "max_violation": solution.max_violation,
                    "n_vars": int(problem.g.shape[0]),
                    "forces": self.forces.copy(),
                }
            )

    # -- full runs -------------------------------------------------------------

    def run(self, duration: float, record: bool = True) -> RunResult:
        n_steps = int(round(duration / self.sim_cfg.dt))
        rows_t, rows_body, rows_q, rows_qd, rows_tau, rows_c, rows_grf = [], [], [], [], [], [], []
        failure = None
        fell = False

        for i in range(n_steps):
            if i % self.control_every == 0:
                self.control_tick()
            if record:
                rows_t.append(self.world.time)
                rows_body.append(self.world.body.as_vector())
                rows_q.append(np.concatenate([ls.q for ls in self.world.legs]))
                rows_qd.append(np.concatenate([ls.qdot for ls in self.world.legs]))
                rows_tau.append(self.torques.reshape(12).copy())
                rows_c.append(self.world.contact_flags.astype(float).copy())
                rows_grf.append(self.world.last_grf.reshape(12).copy())
            try:
                self.world = simcore.step(
                    self.world, self.torques, self.sim_cfg, self.desc, refs=self._refs
                )
            except simcore.NumericalBlowupError as err:
                failure = f"numerical-blowup: {err}"
                fell = True
                break
            if self._fallen():
                fell = True
                failure = "fell"
                break

        trace = RunTrace(
            dt=self.sim_cfg.dt,
            time=np.asarray(rows_t),
            body=np.asarray(rows_body),
            q=np.asarray(rows_q),
            qd=np.asarray(rows_qd),
            tau=np.asarray(rows_tau),
            contact=np.asarray(rows_c),
            grf=np.asarray(rows_grf),
        )

        def cmd_speed(t: float) -> float:
            vx, vy, _ = self.command(t)
            return math.hypot(vx, vy)

        if len(trace) >= 10:
            report = summarize_run(
                trace, self.desc, cmd_speed, fell, step_count=self.planner.step_count
            )
        else:
            report = MetricsReport(None, None, float("nan"), float("nan"), 0.0, 0.0, fell,
                                   0.0, self.planner.step_count)
        return RunResult(trace, report, fell, failure, self.world, self.events, self.mpc_log)

    def _fallen(self) -> bool:
        if self.kinematic:
            return False
        body = self.world.body
        return (
            body.r[2] < FALL_HEIGHT
            or abs(body.theta[0]) > FALL_TILT
            or abs(body.theta[1]) > FALL_TILT
        )
