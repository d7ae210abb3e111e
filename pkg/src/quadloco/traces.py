"""Trace, report, and event-log files for closed-loop runs.

The trace CSV column order is fixed and documented here; downstream tools
(the browser UI replay, plotting scripts) parse it positionally:

    time,
    roll, pitch, yaw, x, y, z, wx, wy, wz, vx, vy, vz        (trunk state)
    q_<leg>_<joint>    x 12   (legs FR, FL, RR, RL; joints abd, hip, knee)
    qd_<leg>_<joint>   x 12
    tau_<leg>_<joint>  x 12
    contact_<leg>      x 4    (0/1)
    grf_<leg>_<axis>   x 12   (world frame)
    foot_<leg>_<axis>  x 12   (world frame, from forward kinematics)

Foot positions are derived columns: they are recomputed from the trunk pose
and joint angles at export time so the CSV is self-contained for renderers
that know nothing about the robot's kinematics.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .metrics import MetricsReport, RunTrace
from .model import LEG_NAMES, RobotDescription, forward_kinematics, rpy_matrix

_JOINTS = ("abd", "hip", "knee")
_AXES = ("x", "y", "z")

BODY_COLUMNS = ("roll", "pitch", "yaw", "x", "y", "z", "wx", "wy", "wz", "vx", "vy", "vz")

TRACE_COLUMNS = (
    ("time",)
    + BODY_COLUMNS
    + tuple(f"q_{leg}_{j}" for leg in LEG_NAMES for j in _JOINTS)
    + tuple(f"qd_{leg}_{j}" for leg in LEG_NAMES for j in _JOINTS)
    + tuple(f"tau_{leg}_{j}" for leg in LEG_NAMES for j in _JOINTS)
    + tuple(f"contact_{leg}" for leg in LEG_NAMES)
    + tuple(f"grf_{leg}_{a}" for leg in LEG_NAMES for a in _AXES)
    + tuple(f"foot_{leg}_{a}" for leg in LEG_NAMES for a in _AXES)
)


def foot_world_from_row(desc: RobotDescription, body_row: np.ndarray, q_row: np.ndarray) -> np.ndarray:
    """World foot positions (4x3) from one trace row's trunk pose and angles."""
    R = rpy_matrix(body_row[0:3])
    r = body_row[3:6]
    feet = np.empty((4, 3))
    for leg in range(4):
        feet[leg] = r + R @ forward_kinematics(desc, leg, q_row[3 * leg : 3 * leg + 3])
    return feet


def trace_to_csv(
    trace: RunTrace,
    desc: RobotDescription,
    path: str | Path | None = None,
    every: int = 1,
) -> str:
    """Serialize a trace, optionally decimated to every n-th sample."""
    if every < 1:
        raise ValueError("every must be >= 1")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for i in range(0, len(trace), every):
        feet = foot_world_from_row(desc, trace.body[i], trace.q[i])
        row = np.concatenate(
            [
                [trace.time[i]],
                trace.body[i],
                trace.q[i],
                trace.qd[i],
                trace.tau[i],
                trace.contact[i],
                trace.grf[i],
                feet.reshape(12),
            ]
        )
        writer.writerow([repr(float(v)) for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def trace_from_csv(source: str | Path) -> RunTrace:
    """Parse a trace CSV back into arrays (derived foot columns are dropped)."""
    text = source if isinstance(source, str) and "\n" in source else Path(source).read_text()
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != TRACE_COLUMNS:
        raise ValueError("trace CSV header does not match the documented column order")
    rows = np.array([[float(v) for v in row] for row in reader])
    if rows.size == 0:
        raise ValueError("trace CSV has no data rows")
    t = rows[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
    return RunTrace(
        dt=dt,
        time=t,
        body=rows[:, 1:13],
        q=rows[:, 13:25],
        qd=rows[:, 25:37],
        tau=rows[:, 37:49],
        contact=rows[:, 49:53],
        grf=rows[:, 53:65],
    )


def report_to_json(
    report: MetricsReport,
    path: str | Path | None = None,
    extra: dict | None = None,
) -> str:
    doc = dict(report.to_dict())
    if extra:
        doc.update(extra)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def events_to_jsonl(events: list[dict], path: str | Path | None = None) -> str:
    lines = [json.dumps(e, sort_keys=True, default=str) for e in events]
    text = "\n".join(lines) + ("\n" if lines else "")
    if path is not None:
        Path(path).write_text(text)
    return text
