"""Parameter sweeps, gait comparison, and the velocity -> parameter lookup.

A sweep enumerates a grid over the five step-shape parameters (swing time,
step height, body height, ellipse radii) crossed with gait and commanded
velocity, runs each point closed loop, and records the metrics. Records are
plain rows that round-trip through CSV byte-identically, so sweep outputs
diff cleanly across machines and worker counts.

The lookup scores each velocity bucket's surviving records by a weighted sum
of min-max normalized cost of transport (lower better) and stance
manipulability (higher better), then keeps the argmin. Driving with the
lookup instead of one fixed parameter set is what buys the efficiency
improvement at off-design speeds.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import product
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .metrics import MetricsReport
from .model import RobotDescription
from .planner import PlannerParams
from .runner import ClosedLoopRunner, constant_command
from .sim import SimConfig

# tested tuning ranges for the step-shape parameters; grids must stay inside
SWING_TIME_RANGE = (0.10, 0.25)
STEP_HEIGHT_RANGE = (0.05, 0.15)
BODY_HEIGHT_RANGE = (0.28, 0.311)
ELLIPSE_RADIUS_RANGE = (0.01, 0.15)
VELOCITY_RANGE = (0.05, 1.00)

VELOCITY_BUCKET = 0.05  # m/s; lookup granularity
GAITS = ("walk", "trot")
SCORE_WEIGHTS = (0.8, 0.2)  # (cost of transport, manipulability)
COT_ONLY_WEIGHTS = (1.0, 0.0)  # pure efficiency ranking, used by gait comparison

# the five grid axes, in enumeration order
SWEPT_FIELDS = ("swing_time", "step_height", "body_height", "ellipse_rx", "ellipse_ry")


class EmptyBucketError(LookupError):
    """No usable record in a velocity bucket."""


def bucket_index(velocity: float) -> int:
    return int(round(velocity / VELOCITY_BUCKET))


def bucket_velocity(index: int) -> float:
    return index * VELOCITY_BUCKET


def _check_range(name: str, values: Sequence[float], lo: float, hi: float) -> None:
    if not values:
        raise ValueError(f"{name} must have at least one sample")
    for v in values:
        if not (lo <= v <= hi):
            raise ValueError(f"{name} sample {v} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class SweepPoint:
    """One grid cell: what to run and where it sits in the enumeration."""

    index: int
    gait: str
    velocity: float
    params: PlannerParams


@dataclass
class SweepGrid:
    """Cartesian grid over gait x velocity x step-shape parameters.

    Samples must lie inside the tested tuning ranges. Velocity 0.0 is also
    accepted as a stationary probe (its record carries no cost of transport).
    The baseline parameter set (PlannerParams defaults) is appended for every
    gait/velocity pair that does not already contain it, so every sweep can
    be compared against the fixed-parameter policy it is trying to beat.
    """

    swing_times: tuple[float, ...] = (0.10, 0.15, 0.20, 0.25)
    step_heights: tuple[float, ...] = (0.05, 0.075, 0.10, 0.125, 0.15)
    body_heights: tuple[float, ...] = (0.28, 0.29, 0.30, 0.31)
    ellipse_rxs: tuple[float, ...] = (0.03, 0.07, 0.11, 0.15)
    ellipse_rys: tuple[float, ...] = (0.01, 0.05, 0.10, 0.15)
    velocities: tuple[float, ...] = (0.1, 0.25, 0.4, 0.55, 0.7, 0.85)
    gaits: tuple[str, ...] = GAITS
    duration: float = 10.0
    seed: int = 0
    include_baseline: bool = True

    def __post_init__(self) -> None:
        _check_range("swing_times", self.swing_times, *SWING_TIME_RANGE)
        _check_range("step_heights", self.step_heights, *STEP_HEIGHT_RANGE)
        _check_range("body_heights", self.body_heights, *BODY_HEIGHT_RANGE)
        _check_range("ellipse_rxs", self.ellipse_rxs, *ELLIPSE_RADIUS_RANGE)
        _check_range("ellipse_rys", self.ellipse_rys, *ELLIPSE_RADIUS_RANGE)
        if not self.velocities:
            raise ValueError("velocities must have at least one sample")
        for v in self.velocities:
            if v != 0.0 and not (VELOCITY_RANGE[0] <= v <= VELOCITY_RANGE[1]):
                raise ValueError(
                    f"velocity sample {v} outside [{VELOCITY_RANGE[0]}, "
                    f"{VELOCITY_RANGE[1]}] (0.0 is allowed as a stationary probe)"
                )
        for g in self.gaits:
            if g not in GAITS:
                raise ValueError(f"unknown gait {g!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @classmethod
    def coarse(cls) -> "SweepGrid":
        """Small grid that still spans the interesting trade-offs; finishes
        on a laptop in well under an hour."""
        return cls(
            swing_times=(0.10, 0.15, 0.20, 0.25),
            step_heights=(0.05, 0.10),
            body_heights=(0.31,),
            ellipse_rxs=(0.07, 0.12),
            ellipse_rys=(0.05,),
            velocities=(0.1, 0.2, 0.3, 0.4, 0.8),
        )

    def combos(self) -> list[PlannerParams]:
        """Parameter sets in enumeration order, baseline appended if absent."""
        out = [
            replace(
                PlannerParams(),
                swing_time=st,
                step_height=sh,
                body_height=bh,
                ellipse_rx=rx,
                ellipse_ry=ry,
            )
            for st, sh, bh, rx, ry in product(
                self.swing_times,
                self.step_heights,
                self.body_heights,
                self.ellipse_rxs,
                self.ellipse_rys,
            )
        ]
        if self.include_baseline:
            base = PlannerParams()
            key = tuple(getattr(base, f) for f in SWEPT_FIELDS)
            if key not in {
                tuple(getattr(p, f) for f in SWEPT_FIELDS) for p in out
            }:
                out.append(base)
        return out

    def points(self) -> list[SweepPoint]:
        """Full enumeration; the index is the merge and tie-break order."""
        pts = []
        i = 0
        for gait in self.gaits:
            for v in self.velocities:
                for params in self.combos():
                    pts.append(SweepPoint(i, gait, float(v), params))
                    i += 1
        return pts


@dataclass
class SweepRecord:
    """Outcome of one grid point."""

    index: int
    gait: str
    velocity: float
    params: PlannerParams
    report: MetricsReport

    @property
    def status(self) -> str:
        if self.report.fell:
            return "fell"
        if self.report.cot is None:
            return "stationary"
        return "ok"

    @property
    def usable(self) -> bool:
        """Stable and with a defined cost of transport: eligible for scoring."""
        return self.status == "ok"

    def is_baseline(self) -> bool:
        base = PlannerParams()
        return all(
            getattr(self.params, f) == getattr(base, f) for f in SWEPT_FIELDS
        )


CSV_COLUMNS = (
    "index",
    "gait",
    "velocity",
    "swing_time",
    "step_height",
    "body_height",
    "ellipse_rx",
    "ellipse_ry",
    "progress_horizon_factor",
    "touchdown_force",
    "track_narrowing",
    "walk_dwell",
    "status",
    "cot",
    "cot_dimensionless",
    "manipulability_mean",
    "tracking_mae",
    "distance",
    "mean_speed",
    "fell",
    "duration",
    "step_count",
)


def _fmt(value) -> str:
    # repr() is the shortest exact round-trip for floats, so output bytes do
    # not depend on platform printf quirks
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _record_row(rec: SweepRecord) -> list[str]:
    p, r = rec.params, rec.report
    return [
        _fmt(rec.index),
        rec.gait,
        _fmt(rec.velocity),
        _fmt(p.swing_time),
        _fmt(p.step_height),
        _fmt(p.body_height),
        _fmt(p.ellipse_rx),
        _fmt(p.ellipse_ry),
        _fmt(p.progress_horizon_factor),
        _fmt(p.touchdown_force),
        _fmt(p.track_narrowing),
        _fmt(p.walk_dwell),
        rec.status,
        _fmt(r.cot),
        _fmt(r.cot_dimensionless),
        _fmt(r.manipulability_mean),
        _fmt(r.tracking_mae),
        _fmt(r.distance),
        _fmt(r.mean_speed),
        _fmt(r.fell),
        _fmt(r.duration),
        _fmt(r.step_count),
    ]


def _parse_row(row: dict[str, str]) -> SweepRecord:
    def f(name: str) -> float:
        return float(row[name])

    def opt(name: str) -> float | None:
        return None if row[name] == "" else float(row[name])

    params = PlannerParams(
        swing_time=f("swing_time"),
        step_height=f("step_height"),
        body_height=f("body_height"),
        ellipse_rx=f("ellipse_rx"),
        ellipse_ry=f("ellipse_ry"),
        progress_horizon_factor=f("progress_horizon_factor"),
        touchdown_force=f("touchdown_force"),
        track_narrowing=f("track_narrowing"),
        walk_dwell=f("walk_dwell"),
    )
    report = MetricsReport(
        cot=opt("cot"),
        cot_dimensionless=opt("cot_dimensionless"),
        manipulability_mean=f("manipulability_mean"),
        tracking_mae=f("tracking_mae"),
        distance=f("distance"),
        mean_speed=f("mean_speed"),
        fell=row["fell"] == "true",
        duration=f("duration"),
        step_count=int(row["step_count"]),
    )
    return SweepRecord(
        index=int(row["index"]),
        gait=row["gait"],
        velocity=f("velocity"),
        params=params,
        report=report,
    )


def records_to_csv(records: Iterable[SweepRecord], path: str | Path | None = None) -> str:
    """Serialize records (sorted by index) to CSV text; optionally write it."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in sorted(records, key=lambda r: r.index):
        writer.writerow(_record_row(rec))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def records_from_csv(source: str | Path) -> list[SweepRecord]:
    """Parse records from a CSV file path or CSV text."""
    text = source if isinstance(source, str) and "\n" in source else Path(source).read_text()
    reader = csv.DictReader(io.StringIO(text))
    missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"record CSV missing columns: {sorted(missing)}")
    return [_parse_row(row) for row in reader]


def _run_point(task: tuple) -> SweepRecord:
    point, duration, desc, sim_cfg = task
    runner = ClosedLoopRunner(
        desc,
        sim_cfg,
        point.params,
        point.gait,
        command=constant_command(point.velocity),
    )
    result = runner.run(duration)
    return SweepRecord(
        index=point.index,
        gait=point.gait,
        velocity=point.velocity,
        params=point.params,
        report=result.report,
    )


def run_sweep(
    grid: SweepGrid,
    desc: RobotDescription | None = None,
    sim_cfg: SimConfig | None = None,
    workers: int = 1,
    progress: Callable[[SweepRecord], None] | None = None,
) -> list[SweepRecord]:
    """Run every grid point and return records sorted by grid index.

    Points are independent, so they can fan out over a process pool; results
    are merged back in enumeration order, which makes the output invariant
    to the worker count. Each point is fully determined by (seed, point), so
    rerunning a sweep reproduces it bit for bit.
    """
    if desc is None:
        desc = RobotDescription()
    if sim_cfg is None:
        sim_cfg = SimConfig(seed=grid.seed)
    tasks = [(p, grid.duration, desc, sim_cfg) for p in grid.points()]
    records: list[SweepRecord] = []
    if workers <= 1:
        for task in tasks:
            rec = _run_point(task)
            records.append(rec)
            if progress is not None:
                progress(rec)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_run_point, tasks, chunksize=1):
                records.append(rec)
                if progress is not None:
                    progress(rec)
    records.sort(key=lambda r: r.index)
    return records


def _normalize(values: list[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi - lo <= 0.0:
        return [0.0] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def _score_candidates(
    cands: list[SweepRecord], weights: tuple[float, float]
) -> list[tuple[float, SweepRecord]]:
    """Weighted normalized score per record; lower is better.

    Manipulability enters negated (more dexterous stances are rewarded). A
    record whose manipulability came out undefined (NaN) gets no reward
    rather than poisoning the bucket.
    """
    w_cot, w_manip = weights
    cots = _normalize([r.report.cot for r in cands])
    raw = [r.report.manipulability_mean for r in cands]
    finite = [m for m in raw if math.isfinite(m)]
    if finite and max(finite) > min(finite):
        lo, hi = min(finite), max(finite)
        manips = [
            (m - lo) / (hi - lo) if math.isfinite(m) else 0.0 for m in raw
        ]
    else:
        manips = [0.0] * len(raw)
    return [
        (w_cot * c - w_manip * m, rec)
        for c, m, rec in zip(cots, manips, cands)
    ]


def _pick_best(
    cands: list[SweepRecord], weights: tuple[float, float]
) -> SweepRecord:
    # ties: cheaper, then slower swing (less actuation), then grid order
    scored = _score_candidates(cands, weights)
    return min(
        scored,
        key=lambda sr: (
            sr[0],
            sr[1].report.cot,
            -sr[1].params.swing_time,
            sr[1].index,
        ),
    )[1]


def _group_by_bucket(records: Iterable[SweepRecord]) -> dict[int, list[SweepRecord]]:
    buckets: dict[int, list[SweepRecord]] = {}
    for rec in records:
        buckets.setdefault(bucket_index(rec.velocity), []).append(rec)
    return buckets


def per_gait_best(
    records: Iterable[SweepRecord],
    gait: str,
    weights: tuple[float, float] = SCORE_WEIGHTS,
) -> dict[int, SweepRecord]:
    """Best usable record of one gait per velocity bucket (may be sparse)."""
    out: dict[int, SweepRecord] = {}
    for bucket, recs in _group_by_bucket(records).items():
        cands = [r for r in recs if r.gait == gait and r.usable]
        if cands:
            out[bucket] = _pick_best(cands, weights)
    return out


@dataclass
class LookupEntry:
    velocity: float
    gait: str
    params: PlannerParams
    cot: float
    manipulability: float

    def to_dict(self) -> dict:
        return {
            "velocity": self.velocity,
            "gait": self.gait,
            "params": {f: getattr(self.params, f) for f in SWEPT_FIELDS},
            "cot_J_per_m": self.cot,
            "manipulability": self.manipulability,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LookupEntry":
        params = replace(PlannerParams(), **d["params"])
        return cls(
            velocity=float(d["velocity"]),
            gait=d["gait"],
            params=params,
            cot=float(d["cot_J_per_m"]),
            manipulability=float(d["manipulability"]),
        )


@dataclass
class LookupTable:
    """Velocity-indexed table of tuned gait + step parameters.

    Buckets are VELOCITY_BUCKET wide; queries snap to the nearest populated
    bucket, so the table degrades gracefully at speeds the sweep never
    sampled.
    """

    entries: dict[int, LookupEntry]
    weights: tuple[float, float] = SCORE_WEIGHTS
    bucket_size: float = VELOCITY_BUCKET

    def best_for(self, velocity: float) -> LookupEntry:
        if not self.entries:
            raise EmptyBucketError("lookup table is empty")
        want = velocity / self.bucket_size
        # nearest populated bucket; ties resolve toward the slower one
        key = min(self.entries, key=lambda b: (abs(b - want), b))
        return self.entries[key]

    def to_json(self, path: str | Path | None = None) -> str:
        doc = {
            "bucket_size": self.bucket_size,
            "weights": list(self.weights),
            "entries": {
                str(b): e.to_dict() for b, e in sorted(self.entries.items())
            },
        }
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source: str | Path) -> "LookupTable":
        text = (
            source
            if isinstance(source, str) and source.lstrip().startswith("{")
            else Path(source).read_text()
        )
        doc = json.loads(text)
        entries = {
            int(b): LookupEntry.from_dict(e) for b, e in doc["entries"].items()
        }
        return cls(
            entries=entries,
            weights=tuple(doc["weights"]),
            bucket_size=float(doc["bucket_size"]),
        )


def build_lookup(
    records: Iterable[SweepRecord],
    weights: tuple[float, float] = SCORE_WEIGHTS,
) -> LookupTable:
    """Score each velocity bucket and keep the winning record.

    Candidates costlier than a surviving baseline (default-parameter) record
    in the same bucket are dropped first, so switching from the fixed policy
    to the lookup can never lose ground at a swept velocity. Buckets where
    every run fell or went nowhere raise EmptyBucketError.
    """
    entries: dict[int, LookupEntry] = {}
    for bucket, recs in sorted(_group_by_bucket(records).items()):
        cands = [r for r in recs if r.usable]
        if not cands:
            raise EmptyBucketError(
                f"no usable record at velocity {bucket_velocity(bucket):.2f}"
            )
        base_cots = [r.report.cot for r in cands if r.is_baseline()]
        if base_cots:
            ceiling = min(base_cots)
            cands = [r for r in cands if r.report.cot <= ceiling]
        best = _pick_best(cands, weights)
        entries[bucket] = LookupEntry(
            velocity=bucket_velocity(bucket),
            gait=best.gait,
            params=best.params,
            cot=best.report.cot,
            manipulability=best.report.manipulability_mean,
        )
    return LookupTable(entries=entries, weights=weights)


@dataclass
class GaitComparison:
    """One velocity bucket's walk-vs-trot summary."""

    velocity: float
    walk_cot: float | None
    trot_cot: float | None
    walk_manipulability: float | None
    trot_manipulability: float | None
    walk_stable: bool
    trot_stable: bool


def compare_gaits(
    records: Iterable[SweepRecord],
    weights: tuple[float, float] = COT_ONLY_WEIGHTS,
) -> list[GaitComparison]:
    """Per-velocity best-of-each-gait table, sorted by velocity.

    Each gait is represented by its cheapest stable record in the bucket:
    the table answers "what does this gait cost at its best", so the ranking
    ignores manipulability (which is still reported from the picked record).
    A gait with no usable record in a bucket reports None metrics and an
    unstable flag; that asymmetry is itself the finding (the slow gait drops
    out as commanded speed rises).
    """
    records = list(records)
    walk = per_gait_best(records, "walk", weights)
    trot = per_gait_best(records, "trot", weights)
    rows = []
    for bucket in sorted(_group_by_bucket(records)):
        w, t = walk.get(bucket), trot.get(bucket)
        rows.append(
            GaitComparison(
                velocity=bucket_velocity(bucket),
                walk_cot=w.report.cot if w else None,
                trot_cot=t.report.cot if t else None,
                walk_manipulability=w.report.manipulability_mean if w else None,
                trot_manipulability=t.report.manipulability_mean if t else None,
                walk_stable=w is not None,
                trot_stable=t is not None,
            )
        )
    return rows


def comparison_to_csv(
    rows: Iterable[GaitComparison], path: str | Path | None = None
) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "velocity",
            "walk_cot",
            "trot_cot",
            "walk_manipulability",
            "trot_manipulability",
            "walk_stable",
            "trot_stable",
        ]
    )
    for r in rows:
        writer.writerow(
            [
                _fmt(r.velocity),
                _fmt(r.walk_cot),
                _fmt(r.trot_cot),
                _fmt(r.walk_manipulability),
                _fmt(r.trot_manipulability),
                _fmt(r.walk_stable),
                _fmt(r.trot_stable),
            ]
        )
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def contour_export(
    records: Iterable[SweepRecord],
    velocity: float,
    gait: str,
    x_field: str = "swing_time",
    y_field: str = "ellipse_rx",
    path: str | Path | None = None,
) -> tuple[list[float], list[float], list[list[float]]]:
    """Cost-of-transport matrix over two swept parameters at one velocity.

    The remaining swept parameters are held at their defaults. Cells with no
    matching record, or whose run fell or stayed put, are marked nan; any
    plotting tool reads that as a hole in the surface. Returns (x samples,
    y samples, row-major matrix), and optionally writes a CSV whose first
    column is x and whose header row is y.
    """
    if x_field not in SWEPT_FIELDS or y_field not in SWEPT_FIELDS:
        raise ValueError(f"contour axes must be two of {SWEPT_FIELDS}")
    if x_field == y_field:
        raise ValueError("contour axes must differ")
    base = PlannerParams()
    held = [f for f in SWEPT_FIELDS if f not in (x_field, y_field)]
    bucket = bucket_index(velocity)
    cells: dict[tuple[float, float], float] = {}
    for rec in records:
        if rec.gait != gait or bucket_index(rec.velocity) != bucket:
            continue
        if any(getattr(rec.params, f) != getattr(base, f) for f in held):
            continue
        key = (getattr(rec.params, x_field), getattr(rec.params, y_field))
        value = rec.report.cot if rec.usable else math.nan
        # keep the cheapest duplicate so reruns merged into one file stay sane
        if key not in cells or (
            math.isnan(cells[key]) or value < cells[key]
        ):
            cells[key] = value
    xs = sorted({k[0] for k in cells})
    ys = sorted({k[1] for k in cells})
    matrix = [
        [cells.get((x, y), math.nan) for y in ys] for x in xs
    ]
    if path is not None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"{x_field}\\{y_field}"] + [_fmt(y) for y in ys])
        for x, row in zip(xs, matrix):
            writer.writerow([_fmt(x)] + [_fmt(v) for v in row])
        Path(path).write_text(buf.getvalue())
    return xs, ys, matrix
