"""Run evaluation: cost of transport, manipulability, velocity tracking.

Cost of transport clamps the total 12-joint mechanical power at each sample
(negative net power does not refund the battery) and normalizes by the net
horizontal displacement of the trunk over the window, giving J/m. The
dimensionless variant divides by weight as well.

Manipulability of a leg is sqrt(max eig / min eig) of (J J^T)^-1, the foot
force-ellipsoid anisotropy; larger is treated as better by the study
scoring. Runs aggregate the time-mean over stance legs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import RobotDescription, leg_jacobian

MIN_DISTANCE = 0.05  # m; below this a window counts as stationary
TRANSIENT_SKIP = 1.0  # s of startup excluded from aggregate metrics


class InsufficientDistanceError(ValueError):
    """Displacement over the window too small for a meaningful CoT."""


class SingularJacobianError(RuntimeError):
    """Jacobian condition number too large for manipulability."""


@dataclass
class RunTrace:
    """Uniformly sampled closed-loop history (body frame conventions match
    the trace CSV; qd is carried in memory for metrics)."""

    dt: float
    time: np.ndarray  # n
    body: np.ndarray  # n x 12 (theta, r, omega, v)
    q: np.ndarray  # n x 12
    qd: np.ndarray  # n x 12
    tau: np.ndarray  # n x 12
    contact: np.ndarray  # n x 4
    grf: np.ndarray  # n x 12

    def __len__(self) -> int:
        return self.time.shape[0]


@dataclass
class MetricsReport:
    cot: float | None  # J/m; None when the run was stationary
    cot_dimensionless: float | None
    manipulability_mean: float
    tracking_mae: float
    distance: float
    mean_speed: float
    fell: bool
    duration: float
    step_count: int = 0

    def to_dict(self) -> dict:
        return {
            "cot_J_per_m": self.cot,
            "cot_dimensionless": self.cot_dimensionless,
            "manipulability_mean": self.manipulability_mean,
            "tracking_mae": self.tracking_mae,
            "distance_m": self.distance,
            "mean_speed": self.mean_speed,
            "fell": self.fell,
            "duration_s": self.duration,
            "step_count": self.step_count,
        }


def cost_of_transport(trace: RunTrace, window: tuple[int, int]) -> float:
    """Positive mechanical work per meter over the sample window [i0, i1).

    Power is the per-sample total qd . tau over all 12 joints, clamped at
    zero from below before integrating.
    """
    i0, i1 = window
    if not 0 <= i0 < i1 <= len(trace):
        raise ValueError(f"window {window} outside trace of length {len(trace)}")
    dr = trace.body[i1 - 1, 3:5] - trace.body[i0, 3:5]
    dist = float(np.hypot(dr[0], dr[1]))
    if dist < MIN_DISTANCE:
        raise InsufficientDistanceError(f"displacement {dist:.4f} m below {MIN_DISTANCE} m")
    power = np.einsum("ij,ij->i", trace.qd[i0:i1], trace.tau[i0:i1])
    energy = float(np.clip(power, 0.0, None).sum()) * trace.dt
    return energy / dist


def manipulability(J: np.ndarray, cond_cap: float = 1e8) -> float:
    """Force-ellipsoid anisotropy sqrt(max eig / min eig) of (J J^T)^-1."""
    sv = np.linalg.svd(np.asarray(J, float), compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > cond_cap:
        raise SingularJacobianError(f"condition {sv[0] / max(sv[-1], 1e-300):.2e} over cap")
    U = np.linalg.inv(J @ J.T)
    eig = np.linalg.eigvalsh(U)
    return float(math.sqrt(eig[-1] / eig[0]))


def tracking_error(
    trace: RunTrace,
    commanded_speed,
    transient: float = TRANSIENT_SKIP,
) -> float:
    """Mean absolute error between commanded and realized planar trunk speed.

    commanded_speed: callable t -> commanded planar speed (m/s), or scalar.
    The first `transient` seconds are excluded.
    """
    mask = trace.time >= trace.time[0] + transient
    if not mask.any():
        raise ValueError("trace shorter than the transient window")
    speeds = np.hypot(trace.body[mask, 9], trace.body[mask, 10])
    if callable(commanded_speed):
        cmd = np.array([commanded_speed(t) for t in trace.time[mask]])
    else:
        cmd = float(commanded_speed)
    return float(np.abs(speeds - cmd).mean())


def mean_stance_manipulability(
    trace: RunTrace, desc: RobotDescription, sample_every: float = 0.01
) -> float:
    """Time-mean manipulability over stance legs, decimated for speed."""
    stride = max(1, int(round(sample_every / trace.dt)))
    vals = []
    for i in range(0, len(trace), stride):
        for leg in range(4):
            if trace.contact[i, leg]:
                q = trace.q[i, 3 * leg : 3 * leg + 3]
                try:
                    vals.append(manipulability(leg_jacobian(desc, leg, q)))
                except SingularJacobianError:
                    continue
    return float(np.mean(vals)) if vals else float("nan")


def summarize_run(
    trace: RunTrace,
    desc: RobotDescription,
    commanded_speed,
    fell: bool,
    step_count: int = 0,
    transient: float = TRANSIENT_SKIP,
) -> MetricsReport:
    """Aggregate report over the run, excluding the startup transient."""
    i0 = int(np.searchsorted(trace.time, trace.time[0] + transient))
    i0 = min(i0, len(trace) - 2)
    window = (i0, len(trace))
    dr = trace.body[-1, 3:5] - trace.body[i0, 3:5]
    dist = float(np.hypot(dr[0], dr[1]))
    span = float(trace.time[-1] - trace.time[i0])
    try:
        cot = cost_of_transport(trace, window)
        cot_dim = cot / (desc.total_mass * 9.81)
    except InsufficientDistanceError:
        cot = None
        cot_dim = None
    manip = mean_stance_manipulability(trace, desc)
    try:
        mae = tracking_error(trace, commanded_speed, transient=transient)
    except ValueError:
        mae = float("nan")
    mean_speed = dist / span if span > 0 else 0.0
    return MetricsReport(
        cot=cot,
        cot_dimensionless=cot_dim,
        manipulability_mean=manip,
        tracking_mae=mae,
        distance=dist,
        mean_speed=mean_speed,
        fell=fell,
        duration=float(trace.time[-1] - trace.time[0]),
        step_count=step_count,
    )
