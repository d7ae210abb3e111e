"""Live teleoperation service: WebSocket in, telemetry out, one sim loop.

Wire protocol (JSON text frames, every frame carries "v": 1):

  client -> server
    {"v": 1, "type": "command", "vx": 0.3, "vy": 0.0, "yaw_rate": 0.0,
     "gait": "walk" | "trot" | "auto",          # optional
     "params": {"swing_time": 0.2, ...},         # optional, bounded edits
     "push": {"force": [fx, fy, fz], "duration": 0.2}}  # optional
    {"v": 1, "type": "take_control"}

  server -> client
    {"v": 1, "type": "hello", "role": ..., "limits": ..., "robot": ...,
     "gait": ..., "params": ..., "telemetry_hz": ..., "lookup": bool}
    {"v": 1, "type": "telemetry", ...}           # schema below
    {"v": 1, "type": "role", "role": ...}
    {"v": 1, "type": "applied", "gait": ..., "params": ...}
    {"v": 1, "type": "push_scheduled", "t_start": ..., "duration": ...}
    {"v": 1, "type": "error", "detail": ...}

One asyncio task owns the simulation; socket sessions exchange immutable
JSON frames with it through queues, so there is no shared mutable state.
The first client to connect commands; later clients watch, and any of them
can send take_control to swap roles. Commands are latched and sampled by
the control loop at 10 Hz regardless of how fast clients send. When the
commander disconnects, the last command decays linearly to zero over one
second rather than cutting to a stop mid-stride.

The sim advances in 10 ms batches paced to the wall clock (time_scale > 1
runs faster than real time, for tests and replays). Telemetry broadcasts on
the simulation clock at the configured rate. Gait/parameter changes defer
until all four feet are down; mid-swing retuning would orphan the active
swing plans.
"""
from __future__ import annotations

import asyncio
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.staticfiles import StaticFiles

from . import sim as simcore
from .config import AppConfig
from .model import LEG_NAMES
from .planner import ALL_STANCE, PlannerParams, TROT, WALK, ellipse_residual
from .runner import ClosedLoopRunner, RunResult, piecewise_command
from .sim import Disturbance
from .study import (
    BODY_HEIGHT_RANGE,
    ELLIPSE_RADIUS_RANGE,
    LookupTable,
    STEP_HEIGHT_RANGE,
    SWING_TIME_RANGE,
)

PROTOCOL_VERSION = 1
COMMAND_PERIOD = 0.1  # s of sim time between command samples (10 Hz)
DECAY_TIME = 1.0  # s to ramp an orphaned command to zero
BATCH_TIME = 0.01  # s of sim time per pacing batch
COT_WINDOW = 2.0  # s of rolling cost-of-transport
COT_MIN_DIST = 0.02  # m; below this the rolling CoT reads null

# wire-editable planner fields and their accepted ranges
PARAM_BOUNDS = {
    "swing_time": SWING_TIME_RANGE,
    "step_height": STEP_HEIGHT_RANGE,
    "body_height": BODY_HEIGHT_RANGE,
    "ellipse_rx": ELLIPSE_RADIUS_RANGE,
    "ellipse_ry": ELLIPSE_RADIUS_RANGE,
}


class ProtocolError(ValueError):
    """Client frame rejected; the session survives, the frame does not."""


@dataclass
class _Session:
    queue: asyncio.Queue
    role: str  # "commander" | "viewer"


def _round(x: float) -> float:
    return round(float(x), 6)


def _vec(a) -> list[float]:
    return [_round(v) for v in np.asarray(a, float).ravel()]


class TeleopService:
    """Owns the closed-loop runner and mediates commands and telemetry."""

    def __init__(self, cfg: AppConfig, time_scale: float = 1.0):
        self.cfg = cfg
        self.time_scale = time_scale
        self.runner = ClosedLoopRunner(
            cfg.robot,
            cfg.sim,
            cfg.planner,
            cfg.gait,
            mpc_cfg=cfg.mpc,
            gains=cfg.gains,
            command=self._command_profile,
        )
        self.lookup: LookupTable | None = None
        if cfg.teleop.lookup_path:
            self.lookup = LookupTable.from_json(Path(cfg.teleop.lookup_path))
        self.auto_gait = self.lookup is not None

        self._active = (0.0, 0.0, 0.0)  # what the control loop sees
        self._pending: Optional[tuple[float, float, float]] = None
        self._last_sample = -math.inf
        self._decay_from: Optional[tuple[float, tuple[float, float, float]]] = None
        self._want_gait: Optional[str] = None
        self._want_params: Optional[PlannerParams] = None

        self.fell = False
        self.failure: Optional[str] = None
        self._step_i = 0
        self._energy = 0.0
        self._history: list[tuple[float, float, float, float]] = []  # t, E, x, y
        self._next_telemetry = 0.0
        self._sessions: dict[int, _Session] = {}
        self._next_session_id = 0
        self._stop = asyncio.Event()

    # -- command plumbing ----------------------------------------------------

    def _command_profile(self, t: float) -> tuple[float, float, float]:
        return self._active

    def _clamp_command(self, vx: float, vy: float, wz: float) -> tuple[float, float, float]:
        lim = self.cfg.teleop
        return (
            float(np.clip(vx, -lim.max_speed, lim.max_speed)),
            float(np.clip(vy, -lim.max_speed, lim.max_speed)),
            float(np.clip(wz, -lim.max_yaw_rate, lim.max_yaw_rate)),
        )

    def submit_command(self, vx: float, vy: float, wz: float) -> None:
        self._pending = self._clamp_command(vx, vy, wz)
        self._decay_from = None

    def commander_lost(self) -> None:
        """Begin ramping the latched command to zero over DECAY_TIME."""
        self._pending = None
        self._decay_from = (self.runner.world.time, self._active)

    def request_gait(self, gait: str) -> None:
        if gait == "auto":
            if self.lookup is None:
                raise ProtocolError("no lookup table loaded; auto gait unavailable")
            self.auto_gait = True
            return
        if gait not in (TROT, WALK):
            raise ProtocolError(f"unknown gait {gait!r}")
        self.auto_gait = False
        self._want_gait = gait

    def request_params(self, edits: dict) -> PlannerParams:
        if not isinstance(edits, dict):
            raise ProtocolError("params must be an object")
        for key, value in edits.items():
            if key not in PARAM_BOUNDS:
                raise ProtocolError(
                    f"parameter {key!r} is not editable (editable: {sorted(PARAM_BOUNDS)})"
                )
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ProtocolError(f"parameter {key} must be a number")
            lo, hi = PARAM_BOUNDS[key]
            if not (lo <= float(value) <= hi):
                raise ProtocolError(f"parameter {key}={value} outside [{lo}, {hi}]")
        base = self._want_params or self.runner.planner.params
        params = replace(base.copy(), **{k: float(v) for k, v in edits.items()})
        self.auto_gait = False
        self._want_params = params
        return params

    def schedule_push(self, force, duration) -> float:
        try:
            fx, fy, fz = (float(v) for v in force)
        except (TypeError, ValueError):
            raise ProtocolError("push.force must be three numbers") from None
        if isinstance(duration, bool) or not isinstance(duration, (int, float)) or duration <= 0:
            raise ProtocolError("push.duration must be a positive number")
        mag = math.sqrt(fx * fx + fy * fy + fz * fz)
        if mag > 200.0:
            raise ProtocolError("push force magnitude limited to 200 N")
        t_start = self.runner.world.time + BATCH_TIME
        cfg = self.runner.sim_cfg
        cfg.disturbances = cfg.disturbances + (
            Disturbance(t_start=t_start, duration=float(duration), force=(fx, fy, fz)),
        )
        return t_start

    def _sample_command(self, now: float) -> None:
        if self._decay_from is not None:
            t0, v0 = self._decay_from
            k = max(0.0, 1.0 - (now - t0) / DECAY_TIME)
            self._active = (v0[0] * k, v0[1] * k, v0[2] * k)
            if k == 0.0:
                self._decay_from = None
            return
        if self._pending is not None and now - self._last_sample >= COMMAND_PERIOD - 1e-9:
            self._active = self._pending
            self._last_sample = now

    def _apply_mode_changes(self) -> None:
        planner = self.runner.planner
        if planner.phase != ALL_STANCE:
            return
        if self.auto_gait and self.lookup is not None:
            speed = math.hypot(self._active[0], self._active[1])
            if speed > 1e-6:
                entry = self.lookup.best_for(speed)
                if entry.gait != planner.gait.kind:
                    planner.set_gait(entry.gait)
                if entry.params != planner.params:
                    planner.set_params(entry.params)
            return
        if self._want_gait is not None and self._want_gait != planner.gait.kind:
            planner.set_gait(self._want_gait)
        self._want_gait = None
        if self._want_params is not None and self._want_params != planner.params:
            planner.set_params(self._want_params)
        self._want_params = None

    # -- simulation ------------------------------------------------------------

    def advance_batch(self) -> None:
        """Step BATCH_TIME of simulation (no-op once fallen)."""
        if self.fell:
            return
        runner = self.runner
        n = int(round(BATCH_TIME / runner.sim_cfg.dt))
        self._sample_command(runner.world.time)
        self._apply_mode_changes()
        for _ in range(n):
            if self._step_i % runner.control_every == 0:
                runner.control_tick()
            self._step_i += 1
            try:
                runner.world = simcore.step(
                    runner.world, runner.torques, runner.sim_cfg, runner.desc, refs=runner._refs
                )
            except simcore.NumericalBlowupError as err:
                self.fell = True
                self.failure = f"numerical-blowup: {err}"
                return
            qd = np.concatenate([ls.qdot for ls in runner.world.legs])
            power = float(runner.torques.reshape(12) @ qd)
            self._energy += max(power, 0.0) * runner.sim_cfg.dt
            if runner._fallen():
                self.fell = True
                self.failure = "fell"
                return
        w = runner.world
        self._history.append((w.time, self._energy, float(w.body.r[0]), float(w.body.r[1])))
        cutoff = w.time - COT_WINDOW
        while len(self._history) > 2 and self._history[0][0] < cutoff:
            self._history.pop(0)

    def rolling_cot(self) -> float | None:
        if len(self._history) < 2:
            return None
        t0, e0, x0, y0 = self._history[0]
        t1, e1, x1, y1 = self._history[-1]
        dist = math.hypot(x1 - x0, y1 - y0)
        if dist < COT_MIN_DIST:
            return None
        return (e1 - e0) / dist

    # -- telemetry -------------------------------------------------------------

    def telemetry_message(self) -> dict:
        runner = self.runner
        world = runner.world
        planner = runner.planner
        v_des = np.array([self._active[0], self._active[1]])
        triggering, residuals = planner._find_triggers(world, v_des)
        ellipses = []
        for leg in range(4):
            center = planner.hip_ground_xy(world, leg)
            if leg in residuals:
                res = residuals[leg]
            else:
                d = planner.foot_offset_yaw_frame(world, leg)
                res = ellipse_residual(d, planner.params.ellipse_rx, planner.params.ellipse_ry)
            ellipses.append(
                {
                    "leg": LEG_NAMES[leg],
                    "center": _vec(center),
                    "rx": _round(planner.params.ellipse_rx),
                    "ry": _round(planner.params.ellipse_ry),
                    "residual": _round(res),
                    "triggered": leg in triggering,
                }
            )
        cot = self.rolling_cot()
        return {
            "v": PROTOCOL_VERSION,
            "type": "telemetry",
            "time": _round(world.time),
            "body": {
                "theta": _vec(world.body.theta),
                "r": _vec(world.body.r),
                "omega": _vec(world.body.omega),
                "v": _vec(world.body.v),
            },
            "feet": [_vec(world.foot_world[leg]) for leg in range(4)],
            "contact": [bool(c) for c in world.contact_flags],
            "grf": [_vec(world.last_grf[leg]) for leg in range(4)],
            "ellipses": ellipses,
            "phase": planner.phase,
            "gait": planner.gait.kind,
            "params": {k: _round(getattr(planner.params, k)) for k in PARAM_BOUNDS},
            "command": {
                "vx": _round(self._active[0]),
                "vy": _round(self._active[1]),
                "yaw_rate": _round(self._active[2]),
            },
            "cot": None if cot is None else _round(cot),
            "step_count": planner.step_count,
            "fell": self.fell,
        }

    def hello_message(self, role: str) -> dict:
        desc = self.cfg.robot
        planner = self.runner.planner
        return {
            "v": PROTOCOL_VERSION,
            "type": "hello",
            "role": role,
            "limits": {
                "max_speed": self.cfg.teleop.max_speed,
                "max_yaw_rate": self.cfg.teleop.max_yaw_rate,
                "param_bounds": {k: list(v) for k, v in PARAM_BOUNDS.items()},
            },
            "robot": {
                "hip_offsets": [_vec(desc.hip_offsets[leg]) for leg in range(4)],
                "leg_names": list(LEG_NAMES),
                "thigh_length": desc.thigh_length,
                "calf_length": desc.calf_length,
                "trunk_size": [2 * abs(desc.hip_offsets[0][0]), 2 * abs(desc.hip_offsets[0][1])],
            },
            "gait": planner.gait.kind,
            "params": {k: _round(getattr(planner.params, k)) for k in PARAM_BOUNDS},
            "telemetry_hz": self.cfg.teleop.telemetry_hz,
            "lookup": self.lookup is not None,
        }

    # -- session registry --------------------------------------------------------

    def register(self) -> tuple[int, _Session]:
        sid = self._next_session_id
        self._next_session_id += 1
        role = "commander" if not any(
            s.role == "commander" for s in self._sessions.values()
        ) else "viewer"
        session = _Session(queue=asyncio.Queue(maxsize=8), role=role)
        self._sessions[sid] = session
        return sid, session

    def unregister(self, sid: int) -> None:
        session = self._sessions.pop(sid, None)
        if session is not None and session.role == "commander":
            self.commander_lost()

    def take_control(self, sid: int) -> list[tuple[int, dict]]:
        """Make sid the commander; returns the role frames to deliver."""
        frames = []
        for other_id, other in self._sessions.items():
            if other.role == "commander" and other_id != sid:
                other.role = "viewer"
                frames.append((other_id, {"v": PROTOCOL_VERSION, "type": "role", "role": "viewer"}))
        session = self._sessions[sid]
        if session.role != "commander":
            session.role = "commander"
            self._decay_from = None
            frames.append((sid, {"v": PROTOCOL_VERSION, "type": "role", "role": "commander"}))
        return frames

    def broadcast(self, frame: dict) -> None:
        for session in self._sessions.values():
            q = session.queue
            if q.full():
                try:
                    q.get_nowait()  # drop the oldest; never stall the sim
                except asyncio.QueueEmpty:
                    pass
            q.put_nowait(frame)

    def deliver(self, sid: int, frame: dict) -> None:
        if sid in self._sessions:
            self.broadcast_to(self._sessions[sid], frame)

    @staticmethod
    def broadcast_to(session: _Session, frame: dict) -> None:
        q = session.queue
        if q.full():
            try:
                q.get_nowait()
            except asyncio.QueueEmpty:
                pass
        q.put_nowait(frame)

    # -- frame handling ------------------------------------------------------------

    def handle_frame(self, sid: int, text: str) -> list[tuple[int, dict]]:
        """Process one client frame; returns (session id, reply frame) pairs."""
        session = self._sessions[sid]
        try:
            frame = json.loads(text)
        except json.JSONDecodeError as err:
            return [(sid, self._error(f"not valid JSON: {err}"))]
        if not isinstance(frame, dict):
            return [(sid, self._error("frame must be a JSON object"))]
        if frame.get("v") != PROTOCOL_VERSION:
            return [(sid, self._error(f"unsupported protocol version {frame.get('v')!r}"))]
        kind = frame.get("type")
        if kind == "take_control":
            return self.take_control(sid)
        if kind != "command":
            return [(sid, self._error(f"unknown frame type {kind!r}"))]
        if session.role != "commander":
            return [(sid, self._error("viewers cannot command; send take_control first"))]
        replies: list[tuple[int, dict]] = []
        try:
            if "gait" in frame:
                if not isinstance(frame["gait"], str):
                    raise ProtocolError("gait must be a string")
                self.request_gait(frame["gait"])
                replies.append((sid, {"v": PROTOCOL_VERSION, "type": "applied", "gait": frame["gait"]}))
            if "params" in frame:
                params = self.request_params(frame["params"])
                replies.append(
                    (sid, {
                        "v": PROTOCOL_VERSION,
                        "type": "applied",
                        "params": {k: _round(getattr(params, k)) for k in PARAM_BOUNDS},
                    })
                )
            if "push" in frame:
                push = frame["push"]
                if not isinstance(push, dict):
                    raise ProtocolError("push must be an object")
                t_start = self.schedule_push(push.get("force"), push.get("duration"))
                replies.append(
                    (sid, {
                        "v": PROTOCOL_VERSION,
                        "type": "push_scheduled",
                        "t_start": _round(t_start),
                        "duration": _round(float(push["duration"])),
                    })
                )
            vx = frame.get("vx", 0.0)
            vy = frame.get("vy", 0.0)
            wz = frame.get("yaw_rate", 0.0)
            for name, val in (("vx", vx), ("vy", vy), ("yaw_rate", wz)):
                if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
                    raise ProtocolError(f"{name} must be a finite number")
            self.submit_command(float(vx), float(vy), float(wz))
        except ProtocolError as err:
            replies.append((sid, self._error(str(err))))
        return replies

    @staticmethod
    def _error(detail: str) -> dict:
        return {"v": PROTOCOL_VERSION, "type": "error", "detail": detail}

    # -- main loop -------------------------------------------------------------------

    async def run_loop(self) -> None:
        """Pace the simulation and broadcast telemetry until stopped."""
        loop = asyncio.get_running_loop()
        period = BATCH_TIME / self.time_scale
        telemetry_dt = 1.0 / self.cfg.teleop.telemetry_hz
        self._next_telemetry = self.runner.world.time
        next_wall = loop.time()
        last_fall_frame = -math.inf
        while not self._stop.is_set():
            self.advance_batch()
            now = loop.time()
            if self.fell:
                # the sim clock is frozen; heartbeat the fall banner instead
                if now - last_fall_frame >= 0.5:
                    self.broadcast(self.telemetry_message())
                    last_fall_frame = now
                next_wall = now
                await asyncio.sleep(0.05)
                continue
            else:
                while self.runner.world.time >= self._next_telemetry - 1e-12:
                    self.broadcast(self.telemetry_message())
                    self._next_telemetry += telemetry_dt
            next_wall += period
            if next_wall < now - 0.25:
                next_wall = now  # fell behind; skip, do not spiral
            await asyncio.sleep(max(0.0, next_wall - now))

    def stop(self) -> None:
        self._stop.set()


def create_app(cfg: AppConfig, time_scale: float = 1.0, static_dir: str | Path | None = None):
    """FastAPI app exposing /ws plus the static browser UI when present."""
    from contextlib import asynccontextmanager

    service = TeleopService(cfg, time_scale=time_scale)

    @asynccontextmanager
    async def lifespan(app):
        task = asyncio.create_task(service.run_loop())
        try:
            yield
        finally:
            service.stop()
            task.cancel()
            try:
                await task
            except asyncio.CancelledError:
                pass

    app = FastAPI(lifespan=lifespan)
    app.state.service = service

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        sid, session = service.register()
        await ws.send_text(json.dumps(service.hello_message(session.role)))

        async def sender():
            while True:
                frame = await session.queue.get()
                await ws.send_text(json.dumps(frame))

        send_task = asyncio.create_task(sender())
        try:
            while True:
                text = await ws.receive_text()
                for target, frame in service.handle_frame(sid, text):
                    service.deliver(target, frame)
        except WebSocketDisconnect:
            pass
        finally:
            send_task.cancel()
            try:
                await send_task
            except asyncio.CancelledError:
                pass
            service.unregister(sid)

    if static_dir is None:
        candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        static_dir = candidate if candidate.is_dir() else None
    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")
    return app


def serve(cfg: AppConfig) -> None:
    """Run the teleoperation service until interrupted."""
    import uvicorn

    app = create_app(cfg)
    uvicorn.run(app, host=cfg.teleop.host, port=cfg.teleop.port, log_level="info")


def run_scripted(
    cfg: AppConfig,
    segments: list[tuple[float, float, float, float]],
    duration: float,
) -> RunResult:
    """Replay a velocity script through the same stack, without networking.

    Deterministic: identical config, seed, and script give identical traces,
    which is what makes recorded teleop sessions reproducible fixtures.
    """
    runner = ClosedLoopRunner(
        cfg.robot,
        cfg.sim,
        cfg.planner,
        cfg.gait,
        mpc_cfg=cfg.mpc,
        gains=cfg.gains,
        command=piecewise_command(segments),
    )
    return runner.run(duration)
