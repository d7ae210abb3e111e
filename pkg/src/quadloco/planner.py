"""Footstep planning from elliptical foot placement sets.

Each stance foot owns an ellipse painted on the ground under its hip
(abduction-joint origin projected along gravity). While a foot stays inside
its ellipse nothing happens; the first control tick a foot is found strictly
outside triggers a swing that carries it back to the ellipse center plus a
velocity-dependent progress offset (half-horizon feedforward plus an inverted
pendulum velocity-error correction). Between swings the body is pushed by the
stance controller alone.

The membership test runs in the yaw-aligned, ground-projected body frame, so
ellipses translate and spin with the robot's heading but ignore roll/pitch.
Swing references are one-lobe cosine profiles: a full cosine period in z
(lift and land with zero velocity), a half period in x/y.

The phase machine has two states: all-stance, and swinging (one swing at a
time; triggers that arrive mid-swing are ignored until the next all-stance
tick). Gait modes restrict which legs may answer a trigger: trot swings
diagonal pairs in alternation, walk follows a fixed crawl cycle, free swings
the triggering legs themselves but never the same leg twice in a row.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    BodyState,
    DIAGONAL_PAIRS,
    LEG_FL,
    LEG_FR,
    LEG_NAMES,
    LEG_RL,
    LEG_RR,
    RobotDescription,
    rot_z,
)
from .sim import WorldState

TROT = "trot"
WALK = "walk"
FREE = "free"
GAIT_KINDS = (TROT, WALK, FREE)

WALK_CYCLE = (LEG_FR, LEG_RL, LEG_FL, LEG_RR)

ALL_STANCE = "all-stance"
SWINGING = "swinging"

# fraction of the swing after which the landing point stops updating
RETARGET_FREEZE = 0.85


class NoEligibleLegError(RuntimeError):
    """A trigger fired but gait rules forbid every candidate leg."""


@dataclass
class PlannerParams:
    """Step-generation parameters (the tunables the parameter study sweeps)."""

    swing_time: float = 0.25
    step_height: float = 0.10
    body_height: float = 0.31
    ellipse_rx: float = 0.07
    ellipse_ry: float = 0.05
    # fraction of the upcoming stance displacement fed forward ahead of the
    # hip's predicted touchdown position; 0.5 centers the stance excursion
    progress_horizon_factor: float = 0.5
    # measured vertical foot load that ends a swing early once the foot is
    # past mid-swing [N]; feet that land before the nominal swing time hand
    # themselves back to the force allocator immediately
    touchdown_force: float = 10.0
    # lateral pull of each landing point toward the body centerline [m]
    track_narrowing: float = 0.0
    # minimum four-legged stance time between walk swings [s]; three feet pin
    # the center of pressure to the support diagonal, so this window is the
    # only chance the force allocator gets to cancel lateral drift
    walk_dwell: float = 0.1

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("swing_time", "step_height", "body_height", "ellipse_rx", "ellipse_ry"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0.0 <= self.progress_horizon_factor <= 1.0:
            raise ValueError("progress_horizon_factor must lie in [0, 1]")
        if self.touchdown_force < 0:
            raise ValueError("touchdown_force must be non-negative")
        if self.track_narrowing < 0:
            raise ValueError("track_narrowing must be non-negative")
        if self.walk_dwell < 0:
            raise ValueError("walk_dwell must be non-negative")

    def copy(self) -> "PlannerParams":
        return PlannerParams(
            self.swing_time,
            self.step_height,
            self.body_height,
            self.ellipse_rx,
            self.ellipse_ry,
            self.progress_horizon_factor,
            self.touchdown_force,
            self.track_narrowing,
            self.walk_dwell,
        )


def ellipse_check(d_xy: np.ndarray, rx: float, ry: float) -> bool:
    """True when the hip-to-foot offset lies strictly outside the ellipse.

    Boundary points count as inside, so a foot parked exactly on the rim
    never triggers.
    """
    return ellipse_residual(d_xy, rx, ry) > 1.0


def ellipse_residual(d_xy: np.ndarray, rx: float, ry: float) -> float:
    """(dx/rx)^2 + (dy/ry)^2; > 1 means outside."""
    dx, dy = float(d_xy[0]), float(d_xy[1])
    return (dx / rx) ** 2 + (dy / ry) ** 2


def progress_offset(
    v_des_xy: np.ndarray,
    v_touchdown_xy: np.ndarray,
    stance_time: float,
    body_height: float,
    gravity: float = 9.81,
    horizon_factor: float = 0.5,
) -> np.ndarray:
    """Landing offset ahead of the hip's touchdown position, per axis.

    Feedforward places the foot a fraction of the displacement the body will
    cover during the leg's upcoming stance, so the stance excursion straddles
    the ellipse center instead of starting at it. The feedback term scales
    the touchdown velocity error by the inverted-pendulum time constant
    sqrt(height / g). Both velocities are body-frame.
    """
    v_des = np.asarray(v_des_xy, float).reshape(2)
    v_td = np.asarray(v_touchdown_xy, float).reshape(2)
    k = math.sqrt(body_height / gravity)
    return v_des * stance_time * horizon_factor + k * (v_td - v_des)


def predict_touchdown(
    com_xy: np.ndarray,
    v_xy: np.ndarray,
    stance_feet_xy: list[np.ndarray],
    swing_time: float,
    body_height: float,
    gravity: float = 9.81,
) -> tuple[np.ndarray, np.ndarray]:
    """Body displacement and velocity at the end of the upcoming swing.

    With two stance feet nothing can steer the body about the line through
    them, so the lateral error e = y - y_line(x) diverges as an inverted
    pendulum driven by the line slope: de/dt = vy - slope * vx. Forward
    motion is taken as constant velocity, and so is everything when three
    or more feet stay down. Returns (displacement_xy, v_xy) in the same
    frame as the inputs.
    """
    com = np.asarray(com_xy, float).reshape(2)
    v = np.asarray(v_xy, float).reshape(2)
    if len(stance_feet_xy) != 2:
        return v * swing_time, v.copy()
    p1 = np.asarray(stance_feet_xy[0], float).reshape(2)
    p2 = np.asarray(stance_feet_xy[1], float).reshape(2)
    dx = float(p2[0] - p1[0])
    if abs(dx) < 1e-6:
        return v * swing_time, v.copy()
    slope = float(p2[1] - p1[1]) / dx

    def y_line(x: float) -> float:
        return float(p1[1]) + slope * (x - float(p1[0]))

    e = float(com[1]) - y_line(float(com[0]))
    e_dot = float(v[1]) - slope * float(v[0])
    omega = math.sqrt(gravity / body_height)
    ch = math.cosh(omega * swing_time)
    sh = math.sinh(omega * swing_time)
    e_end = e * ch + e_dot / omega * sh
    e_dot_end = e * omega * sh + e_dot * ch
    x_end = float(com[0]) + float(v[0]) * swing_time
    y_end = y_line(x_end) + e_end
    vy_end = e_dot_end + slope * float(v[0])
    disp = np.array([float(v[0]) * swing_time, y_end - float(com[1])])
    v_end = np.array([float(v[0]), vy_end])
    return disp, v_end


def swing_sample(
    t: float, swing_time: float, step_height: float, d_xy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Swing-foot offset from liftoff at time t, with velocity and acceleration.

    Vertical: full cosine period, peak acceleration a_z = h/2 * (2 pi / dT)^2,
    apex h at t = dT/2, touchdown at liftoff height with zero velocity.
    Horizontal: half cosine period per axis, peak acceleration
    a = d/2 * (pi / dT)^2, terminal displacement exactly d.
    Returns (p, v, a) as 3-vectors (x, y, z).
    """
    if not 0.0 <= t <= swing_time:
        raise ValueError(f"swing sample time {t} outside [0, {swing_time}]")
    d = np.asarray(d_xy, float).reshape(2)
    ratio = t / swing_time

    a_bar_z = step_height * 0.5 * (2.0 * math.pi / swing_time) ** 2
    wz = 2.0 * math.pi * ratio
    az = a_bar_z * math.cos(wz)
    vz = a_bar_z * (swing_time / (2.0 * math.pi)) * math.sin(wz)
    pz = a_bar_z * (swing_time / (2.0 * math.pi)) ** 2 * (1.0 - math.cos(wz))

    a_bar_xy = d * 0.5 * (math.pi / swing_time) ** 2
    wxy = math.pi * ratio
    axy = a_bar_xy * math.cos(wxy)
    vxy = a_bar_xy * (swing_time / math.pi) * math.sin(wxy)
    pxy = a_bar_xy * (swing_time / math.pi) ** 2 * (1.0 - math.cos(wxy))

    p = np.array([pxy[0], pxy[1], pz])
    v = np.array([vxy[0], vxy[1], vz])
    a = np.array([axy[0], axy[1], az])
    return p, v, a


@dataclass
class GaitState:
    """Gait mode plus the alternation memory the selection rules need."""

    kind: str = TROT
    cycle: tuple[int, ...] = WALK_CYCLE
    last_pair: Optional[frozenset] = None  # trot
    last_leg: Optional[int] = None  # walk
    last_legs: frozenset = frozenset()  # free

    def __post_init__(self) -> None:
        if self.kind not in GAIT_KINDS:
            raise ValueError(f"unknown gait {self.kind!r}")
        if sorted(self.cycle) != [0, 1, 2, 3]:
            raise ValueError("walk cycle must visit each leg once")

    def reset(self) -> None:
        self.last_pair = None
        self.last_leg = None
        self.last_legs = frozenset()


def select_swing_legs(
    gait: GaitState, triggering: frozenset | set, residuals: dict[int, float] | None = None
) -> frozenset:
    """Pick which legs answer a trigger under the active gait's rules.

    Raises NoEligibleLegError when every candidate is ruled out (the planner
    then simply stays in stance for the tick).
    """
    triggering = frozenset(triggering)
    if not triggering:
        raise ValueError("select_swing_legs needs a nonempty trigger set")
    residuals = residuals or {}

    if gait.kind == TROT:
        if gait.last_pair is not None:
            # strict alternation: the other diagonal pair moves next, even
            # when the trigger came from the pair that just landed
            other = DIAGONAL_PAIRS[1] if gait.last_pair == DIAGONAL_PAIRS[0] else DIAGONAL_PAIRS[0]
            return other
        # first step: the pair containing the worst offender
        best = min(sorted(triggering), key=lambda leg: (-residuals.get(leg, 0.0), leg))
        for pair in DIAGONAL_PAIRS:
            if best in pair:
                return pair
        raise AssertionError("leg outside diagonal pairs")

    if gait.kind == WALK:
        if gait.last_leg is None:
            order = {leg: i for i, leg in enumerate(gait.cycle)}
            return frozenset({min(triggering, key=lambda leg: order[leg])})
        start = gait.cycle.index(gait.last_leg)
        for dist in range(1, 4):
            cand = gait.cycle[(start + dist) % 4]
            if cand in triggering:
                return frozenset({cand})
        raise NoEligibleLegError("walk: only the just-swung leg triggered")

    # free: triggering legs minus the immediately previous swing set, max two
    eligible = triggering - gait.last_legs
    if not eligible:
        raise NoEligibleLegError("free: every triggering leg just swung")
    ranked = sorted(eligible, key=lambda leg: (-residuals.get(leg, 0.0), leg))
    return frozenset(ranked[:2])


def commit_selection(gait: GaitState, selected: frozenset) -> None:
    if gait.kind == TROT:
        gait.last_pair = frozenset(selected)
    elif gait.kind == WALK:
        (leg,) = selected
        gait.last_leg = leg
    else:
        gait.last_legs = frozenset(selected)


def body_reference(
    body: BodyState,
    v_des_xy: np.ndarray,
    yaw_rate: float,
    n_samples: int,
    dt: float,
    height: float,
) -> list[BodyState]:
    """Forward-integrated trunk reference: commanded planar velocity rotated
    by the evolving yaw, fixed height, level roll/pitch."""
    v_des = np.asarray(v_des_xy, float).reshape(2)
    out: list[BodyState] = []
    x, y = float(body.r[0]), float(body.r[1])
    yaw = float(body.theta[2])
    for _ in range(n_samples):
        c, s = math.cos(yaw), math.sin(yaw)
        x += (c * v_des[0] - s * v_des[1]) * dt
        y += (s * v_des[0] + c * v_des[1]) * dt
        yaw += yaw_rate * dt
        c, s = math.cos(yaw), math.sin(yaw)
        v_world = np.array([c * v_des[0] - s * v_des[1], s * v_des[0] + c * v_des[1], 0.0])
        out.append(
            BodyState(
                np.array([0.0, 0.0, yaw]),
                np.array([x, y, height]),
                np.array([0.0, 0.0, yaw_rate]),
                v_world,
            )
        )
    return out


@dataclass
class SwingPlan:
    """Frozen at trigger time: everything needed to replay one foot's swing."""

    leg: int
    lift_world: np.ndarray  # 3
    yaw0: float
    d_xy: np.ndarray  # 2, displacement in the liftoff yaw frame
    swing_time: float
    step_height: float
    target_world: np.ndarray  # 3, landing point

    def offsets_world(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p, v, a = swing_sample(t, self.swing_time, self.step_height, self.d_xy)
        c, s = math.cos(self.yaw0), math.sin(self.yaw0)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return rot @ p, rot @ v, rot @ a

    def retarget(self, target_xy_world: np.ndarray, t: float) -> None:
        """Move the landing point mid-flight, keeping the path continuous.

        The xy profile is reshaped so the reference position at time t is
        unchanged while the terminal point becomes the new target; the
        vertical bump keeps its original anchor height.
        """
        s = 0.5 * (1.0 - math.cos(math.pi * t / self.swing_time))
        if s >= 0.95:
            return
        c, sn = math.cos(self.yaw0), math.sin(self.yaw0)
        rot = np.array([[c, -sn], [sn, c]])
        tgt = np.asarray(target_xy_world, float).reshape(2)
        p_now = self.lift_world[:2] + rot @ (self.d_xy * s)
        self.d_xy = rot.T @ ((tgt - p_now) / (1.0 - s))
        lift = self.lift_world.copy()
        lift[:2] = tgt - rot @ self.d_xy
        self.lift_world = lift
        new_target = self.target_world.copy()
        new_target[:2] = tgt
        self.target_world = new_target


@dataclass
class ReferenceTick:
    """One control tick of references for the whole robot (body frame feet)."""

    time: float
    phase: str
    body: BodyState
    p: np.ndarray  # 4x3 foot positions, body frame
    v: np.ndarray  # 4x3 foot velocities, body frame
    a: np.ndarray  # 4x3 foot accelerations, body frame
    contact: np.ndarray  # 4 ints, 1 = stance
    swing_legs: frozenset = frozenset()


class Planner:
    """Per-tick reference generator; call plan_step once per control tick."""

    def __init__(
        self,
        desc: RobotDescription,
        params: PlannerParams,
        gait: str = TROT,
        control_dt: float = 0.002,
        gravity: float = 9.81,
    ):
        self.desc = desc
        self.params = params.copy()
        self.gait = GaitState(kind=gait)
        self.control_dt = control_dt
        self.gravity = gravity
        self.phase = ALL_STANCE
        self.swing_plans: dict[int, SwingPlan] = {}
        self.swing_ticks_total = 0
        self.swing_tick_index = 0
        self.elapsed = 0.0
        self.body_refs: list[BodyState] = []
        self.step_count = 0
        self.last_touchdown_time = -math.inf
        self.events: list[dict] = []
        self._noelig_key: tuple | None = None

    # -- mode/parameter updates (teleop) ------------------------------------

    def set_params(self, params: PlannerParams) -> None:
        """Applies to swings triggered after this call; active swings keep
        their frozen plan."""
        self.params = params.copy()

    def set_gait(self, kind: str) -> None:
        if kind == self.gait.kind:
            return
        self.gait = GaitState(kind=kind)

    # -- geometry ------------------------------------------------------------

    def hip_ground_xy(self, world: WorldState, leg: int) -> np.ndarray:
        """World xy of the abduction-joint origin projected to the ground."""
        R = world.body.rotation()
        hip = world.body.r + R @ self.desc.hip_offsets[leg]
        return hip[:2]

    def foot_offset_yaw_frame(self, world: WorldState, leg: int) -> np.ndarray:
        """Hip-to-foot offset in the yaw-aligned ground frame (the ellipse frame)."""
        yaw = world.body.theta[2]
        d_world = world.foot_world[leg, :2] - self.hip_ground_xy(world, leg)
        c, s = math.cos(yaw), math.sin(yaw)
        return np.array([c * d_world[0] + s * d_world[1], -s * d_world[0] + c * d_world[1]])

    # -- phase machine --------------------------------------------------------

    def plan_step(self, world: WorldState, v_des_xy: np.ndarray, yaw_rate: float = 0.0) -> ReferenceTick:
        v_des = np.asarray(v_des_xy, float).reshape(2)
        if self.phase == SWINGING:
            self._early_touchdowns(world)
            if self.swing_plans:
                tick = self._emit_swing_tick(world, v_des, yaw_rate)
                if self.swing_tick_index >= self.swing_ticks_total:
                    self._finish_swing(world)
                return tick
            # every foot already loaded: fall through so a fresh trigger can
            # start the next step on the same tick
            self.last_touchdown_time = world.time
            self._reset_phase()

        if (
            self.gait.kind == WALK
            and world.time - self.last_touchdown_time < self.params.walk_dwell
        ):
            return self._emit_stance_tick(world, v_des, yaw_rate)
        triggering, residuals = self._find_triggers(world, v_des)
        if triggering:
            try:
                selected = select_swing_legs(self.gait, triggering, residuals)
            except NoEligibleLegError as err:
                self._log_no_eligible(world, triggering, err)
                selected = frozenset()
            if selected:
                self._start_swing(world, v_des, yaw_rate, selected, triggering, residuals)
                tick = self._emit_swing_tick(world, v_des, yaw_rate)
                if self.swing_tick_index >= self.swing_ticks_total:
                    self._finish_swing(world)
                return tick
        return self._emit_stance_tick(world, v_des, yaw_rate)

    def _log_no_eligible(self, world: WorldState, triggering: frozenset, err: Exception) -> None:
        # collapse per-tick repeats while the same stalemate persists
        key = (self.gait.last_leg, triggering)
        if self._noelig_key == key:
            return
        self._noelig_key = key
        self.events.append(
            {
                "t": world.time,
                "event": "no_eligible_leg",
                "triggers": sorted(LEG_NAMES[i] for i in triggering),
                "reason": str(err),
            }
        )

    def _find_triggers(
        self, world: WorldState, v_des: np.ndarray
    ) -> tuple[frozenset, dict[int, float]]:
        """Stance feet outside the ellipse, excluding leading-side exits.

        A foot deliberately lands ahead of the ellipse center (stance
        feedforward) and re-enters the set as the body passes over it, so an
        offset with a positive component along the commanded direction does
        not demand a step yet. Trailing and lateral exits do. With no
        commanded motion every exit counts.
        """
        triggering = set()
        residuals: dict[int, float] = {}
        vn = float(np.hypot(v_des[0], v_des[1]))
        for leg in range(4):
            if not world.contact_flags[leg]:
                continue
            d = self.foot_offset_yaw_frame(world, leg)
            res = ellipse_residual(d, self.params.ellipse_rx, self.params.ellipse_ry)
            residuals[leg] = res
            if res > 1.0 and (vn < 1e-9 or float(d @ v_des) <= 1e-12):
                triggering.add(leg)
        return frozenset(triggering), residuals

    def _start_swing(
        self,
        world: WorldState,
        v_des: np.ndarray,
        yaw_rate: float,
        selected: frozenset,
        triggering: frozenset,
        residuals: dict[int, float],
    ) -> None:
        self._noelig_key = None
        params = self.params
        yaw = float(world.body.theta[2])
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s], [s, c]])
        # the first swing of a fresh trot is half-length, staggering the two
        # diagonal pairs so the support line never trails the trunk for a
        # whole swing during gait initiation
        swing_time = params.swing_time
        if self.gait.kind == TROT and self.gait.last_pair is None:
            swing_time *= 0.5
        targets = self._landing_targets(world, v_des, selected)
        self.swing_plans = {}
        for leg in sorted(selected):
            lift = world.foot_world[leg].copy()
            target = lift.copy()
            target[:2] = targets[leg]
            d_total = rot.T @ (target[:2] - lift[:2])
            self.swing_plans[leg] = SwingPlan(
                leg, lift, yaw, d_total, swing_time, params.step_height, target
            )
        self.swing_ticks_total = math.ceil(swing_time / self.control_dt)
        self.swing_tick_index = 0
        self.elapsed = 0.0
        self.body_refs = body_reference(
            world.body, v_des, yaw_rate, self.swing_ticks_total, self.control_dt, params.body_height
        )
        commit_selection(self.gait, selected)
        self.phase = SWINGING
        self.step_count += 1
        self.events.append(
            {
                "t": world.time,
                "event": "swing_start",
                "legs": sorted(LEG_NAMES[i] for i in selected),
                "triggers": sorted(LEG_NAMES[i] for i in triggering),
                "residuals": {LEG_NAMES[i]: round(r, 4) for i, r in residuals.items()},
                "targets": {
                    LEG_NAMES[i]: [round(float(x), 4) for x in plan.target_world]
                    for i, plan in self.swing_plans.items()
                },
            }
        )

    def _landing_targets(
        self,
        world: WorldState,
        v_des: np.ndarray,
        legs: frozenset,
    ) -> dict[int, np.ndarray]:
        """Landing points (world xy) for the given swinging legs.

        Shared by swing initiation and the per-tick retargeting loop, so a
        foot in flight keeps aiming with the freshest body state. The trunk
        under force control does not follow the passive pendulum, so
        extrapolating the trigger state to touchdown biases every landing
        point; the live state is the unbiased estimate, and retargeting
        keeps it fresh all the way to the freeze point.
        """
        params = self.params
        yaw = float(world.body.theta[2])
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s], [s, c]])
        v_touch_body = rot.T @ world.body.v[:2]
        disp = np.zeros(2)
        # a walking leg stands through the other three swings of the cycle,
        # a trotting leg only through the opposite pair's one
        slots = 4 if self.gait.kind == WALK else 2
        stance_time = (slots - 1) * params.swing_time
        prog = progress_offset(
            v_des,
            v_touch_body,
            stance_time,
            params.body_height,
            self.gravity,
            params.progress_horizon_factor,
        )
        targets = {}
        for leg in sorted(legs):
            targets[leg] = self.hip_ground_xy(world, leg) + rot @ prog
            if params.track_narrowing > 0.0:
                # pull the landing toward the body centerline: a narrower
                # track flattens the diagonal support line, which shrinks the
                # lateral rocking that speed pumps into a two-beat gait
                side = 1.0 if self.desc.hip_offsets[leg][1] > 0 else -1.0
                targets[leg] = targets[leg] - rot @ np.array([0.0, side * params.track_narrowing])
        if len(targets) == 2:
            com_now = rot.T @ world.body.r[:2]
            self._capture_correction(targets, rot, com_now, v_touch_body, v_des)
        # keep capture steps inside the leg's workspace: cap the target's
        # distance from the hip's ground point
        reach_sq = self.desc.max_reach**2 - params.body_height**2
        r_max = 0.85 * math.sqrt(max(reach_sq, 1e-4))
        for leg in sorted(legs):
            hip = self.hip_ground_xy(world, leg)
            excur = targets[leg] - hip
            dist = float(np.hypot(excur[0], excur[1]))
            if dist > r_max:
                targets[leg] = hip + excur * (r_max / dist)
        return targets

    def _capture_correction(
        self,
        targets: dict[int, np.ndarray],
        rot: np.ndarray,
        com_touch: np.ndarray,
        v_touch: np.ndarray,
        v_des: np.ndarray,
    ) -> None:
        """Shift a swinging pair's landing line to the lateral capture point.

        Per-hip capture offsets miss where the new support line actually
        crosses the body: with feet staggered fore-aft of the CoM the
        crossing carries an alternating lateral bias. In the error
        coordinate e = y - y_line(x) the two-contact dynamics reduce to an
        undriven inverted pendulum, so placing the line where
        e + de/dt / omega = 0 at touchdown contracts e by exp(-omega T)
        over each stance phase. All math is in the yaw frame; com_touch,
        v_touch and v_des are yaw-frame predictions at touchdown.
        """
        legs = sorted(targets)
        a = rot.T @ targets[legs[0]]
        b = rot.T @ targets[legs[1]]
        dx = float(b[0] - a[0])
        if abs(dx) < 1e-6:
            return
        slope = float(b[1] - a[1]) / dx
        x_td, y_td = float(com_touch[0]), float(com_touch[1])
        y_at = float(a[1]) + slope * (x_td - float(a[0]))
        omega = math.sqrt(self.gravity / self.params.body_height)
        e_dot = float(v_touch[1]) - float(v_des[1]) - slope * float(v_touch[0])
        desired = y_td + e_dot / omega
        corr = float(np.clip(desired - y_at, -0.12, 0.12))
        for leg in legs:
            t_yaw = rot.T @ targets[leg]
            t_yaw[1] += corr
            targets[leg] = rot @ t_yaw

    def _early_touchdowns(self, world: WorldState) -> None:
        """Hand a swinging foot back to stance as soon as it actually loads.

        A foot past mid-swing whose measured ground reaction exceeds the
        touchdown threshold has landed, whatever the nominal timer says;
        keeping it in swing would leave the force allocator fighting with
        two legs while a third silently takes weight.
        """
        thresh = self.params.touchdown_force
        if thresh <= 0.0:
            return
        t_next = self.elapsed + self.control_dt
        for leg in list(self.swing_plans):
            plan = self.swing_plans[leg]
            if t_next < 0.5 * plan.swing_time:
                continue
            if world.last_grf[leg, 2] > thresh:
                del self.swing_plans[leg]
                self.events.append(
                    {
                        "t": world.time,
                        "event": "touchdown",
                        "legs": [LEG_NAMES[leg]],
                        "early": True,
                    }
                )

    def lateral_weave(self) -> float:
        """Normalized lateral offset of the trunk reference for a crawl.

        Both support diagonals pass through the trunk center, so a crawl
        holding its trunk reference on the centerline lifts every leg with
        the center of mass exactly on the tipping ridge of the remaining
        three feet; feet can only push, and a tip past the ridge toward the
        lifted corner is unrecoverable. The reference therefore leans a
        little toward the interior of the support triangle: away from the
        swinging leg's side while a foot is in the air, away from the next
        stepping side while all four are down. Lateral authority only
        exists in four-legged stance (three feet pin the center of pressure
        to the ridge), so crossings happen in the stance windows and the
        offset holds constant through each swing.

        Returns the offset in units of the weave amplitude, zero for gaits
        that never stand on three legs.
        """
        if self.gait.kind != WALK:
            return 0.0
        if self.phase == SWINGING and len(self.swing_plans) == 1:
            (leg,) = self.swing_plans
        elif self.gait.last_leg is not None:
            cycle = self.gait.cycle
            leg = cycle[(cycle.index(self.gait.last_leg) + 1) % 4]
        else:
            return 0.0
        return -1.0 if self.desc.hip_offsets[leg, 1] > 0 else 1.0

    def _retarget_swings(self, world: WorldState, v_des: np.ndarray, t: float) -> None:
        """Re-aim every foot in flight from the current body state.

        The landing law is cheap enough to evaluate every tick; continuous
        updates keep the capture shift based on the live velocity instead of
        the one sampled at liftoff. Targets freeze over the final stretch so
        touchdown is not chasing a moving point.
        """
        live = {
            leg: plan
            for leg, plan in self.swing_plans.items()
            if t < RETARGET_FREEZE * plan.swing_time
        }
        if not live:
            return
        targets = self._landing_targets(world, v_des, frozenset(live))
        for leg, plan in live.items():
            plan.retarget(targets[leg], t)

    def _finish_swing(self, world: WorldState) -> None:
        self.events.append(
            {
                "t": world.time,
                "event": "touchdown",
                "legs": sorted(LEG_NAMES[i] for i in self.swing_plans),
            }
        )
        self.last_touchdown_time = world.time
        self._reset_phase()

    def _reset_phase(self) -> None:
        self.phase = ALL_STANCE
        self.swing_plans = {}
        self.swing_tick_index = 0
        self.swing_ticks_total = 0
        self.elapsed = 0.0
        self.body_refs = []

    def _emit_swing_tick(self, world: WorldState, v_des: np.ndarray, yaw_rate: float) -> ReferenceTick:
        idx = self.swing_tick_index
        n = self.swing_ticks_total
        t = self.params_time(idx, n)
        self.elapsed = t
        self._retarget_swings(world, v_des, t)
        body_ref = self.body_refs[min(idx, len(self.body_refs) - 1)]

        R = world.body.rotation()
        omega_body = R.T @ world.body.omega
        p = np.empty((4, 3))
        v = np.zeros((4, 3))
        a = np.zeros((4, 3))
        contact = np.ones(4, dtype=int)
        for leg in range(4):
            if leg in self.swing_plans:
                plan = self.swing_plans[leg]
                off_p, off_v, off_a = plan.offsets_world(t)
                target = plan.lift_world + off_p
                p_b = R.T @ (target - world.body.r)
                p[leg] = p_b
                v[leg] = R.T @ (off_v - world.body.v) - np.cross(omega_body, p_b)
                a[leg] = R.T @ off_a
                contact[leg] = 0
            else:
                p[leg] = R.T @ (world.foot_world[leg] - world.body.r)
        self.swing_tick_index += 1
        return ReferenceTick(
            world.time, SWINGING, body_ref, p, v, a, contact, frozenset(self.swing_plans)
        )

    def params_time(self, idx: int, n: int) -> float:
        """Sample time for swing tick idx of n: the last tick lands exactly at
        the swing time so touchdown is hit on the grid."""
        plan = next(iter(self.swing_plans.values()))
        if idx >= n - 1:
            return plan.swing_time
        return (idx + 1) * self.control_dt

    def _emit_stance_tick(self, world: WorldState, v_des: np.ndarray, yaw_rate: float) -> ReferenceTick:
        refs = body_reference(world.body, v_des, yaw_rate, 1, self.control_dt, self.params.body_height)
        R = world.body.rotation()
        p = np.empty((4, 3))
        for leg in range(4):
            p[leg] = R.T @ (world.foot_world[leg] - world.body.r)
        return ReferenceTick(
            world.time,
            ALL_STANCE,
            refs[0],
            p,
            np.zeros((4, 3)),
            np.zeros((4, 3)),
            np.ones(4, dtype=int),
        )

    # -- horizon queries for the stance controller ---------------------------

    def contact_horizon(self, n_steps: int, horizon_dt: float) -> np.ndarray:
        """n_steps x 4 stance schedule starting now.

        The current swing is reported exactly; beyond it the gait's periodic
        continuation is extrapolated back-to-back (alternating diagonal pairs
        for trot, the crawl cycle for walk), so the force controller shifts
        weight toward the next support pattern before each phase change. The
        first row always reflects the actual current contact state, and the
        free gait keeps the old repeat-last behavior since its future legs
        are not known in advance.
        """
        sched = np.ones((n_steps, 4), dtype=int)
        T = self.params.swing_time
        phases: list[tuple[float, float, frozenset]] = []
        t0 = 0.0
        prev: frozenset | None = None
        if self.phase == SWINGING and self.swing_plans:
            plan = next(iter(self.swing_plans.values()))
            t0 = max(plan.swing_time - self.elapsed, 0.0)
            cur = frozenset(self.swing_plans)
            phases.append((0.0, t0, cur))
            prev = cur
        else:
            # in stance: anticipation starts one step out, row 0 stays honest
            t0 = horizon_dt
            if self.gait.kind == TROT:
                prev = self.gait.last_pair
            elif self.gait.kind == WALK and self.gait.last_leg is not None:
                prev = frozenset({self.gait.last_leg})

        end = n_steps * horizon_dt
        while prev is not None and t0 < end:
            if self.gait.kind == TROT:
                nxt = DIAGONAL_PAIRS[1] if prev == DIAGONAL_PAIRS[0] else DIAGONAL_PAIRS[0]
            elif self.gait.kind == WALK:
                leg = next(iter(prev))
                nxt = frozenset({self.gait.cycle[(self.gait.cycle.index(leg) + 1) % 4]})
            else:
                break
            phases.append((t0, t0 + T, nxt))
            t0 += T
            prev = nxt

        for start, stop, legs in phases:
            for k in range(n_steps):
                t = k * horizon_dt
                if start - 1e-12 <= t < stop - 1e-12:
                    for leg in legs:
                        sched[k, leg] = 0
        return sched

    def drain_events(self) -> list[dict]:
        out = self.events
        self.events = []
        return out
