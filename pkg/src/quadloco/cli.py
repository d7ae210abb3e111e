"""Command-line entry points.

    quadloco run           one closed-loop run -> trace CSV + report JSON
    quadloco sweep         parameter sweep -> records/lookup/comparison files
    quadloco compare-gaits walk-vs-trot table from an existing records CSV
    quadloco contour       CoT matrix over two parameters from records
    quadloco teleop        live WebSocket teleoperation service (or replay)

Every subcommand accepts --config pointing at a JSON file whose sections
mirror the library's config dataclasses; flags override the file. Exit codes:
0 success, 1 usage/config errors, 2 domain failures (fall, empty bucket).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .config import AppConfig, ConfigError, load_config
from .runner import ClosedLoopRunner, constant_command
from .study import (
    EmptyBucketError,
    SWEPT_FIELDS,
    build_lookup,
    compare_gaits,
    comparison_to_csv,
    contour_export,
    records_from_csv,
    records_to_csv,
    run_sweep,
)
from .traces import events_to_jsonl, report_to_json, trace_to_csv

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DOMAIN = 2


def _apply_overrides(cfg: AppConfig, args: argparse.Namespace) -> AppConfig:
    if getattr(args, "seed", None) is not None:
        cfg.sim.seed = args.seed
        cfg.study.grid.seed = args.seed
    if getattr(args, "gait", None) is not None:
        cfg.gait = args.gait
    if getattr(args, "duration", None) is not None:
        cfg.study.grid.duration = args.duration
    return cfg


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    duration = args.duration if args.duration is not None else 10.0
    runner = ClosedLoopRunner(
        cfg.robot,
        cfg.sim,
        cfg.planner,
        cfg.gait,
        mpc_cfg=cfg.mpc,
        gains=cfg.gains,
        command=constant_command(args.velocity, args.vy, args.yaw_rate),
    )
    t0 = time.time()
    result = runner.run(duration)
    wall = time.time() - t0
    trace_to_csv(result.trace, cfg.robot, out / "trace.csv", every=args.every)
    report_to_json(
        result.report,
        out / "report.json",
        extra={
            "gait": cfg.gait,
            "commanded_vx": args.velocity,
            "commanded_vy": args.vy,
            "commanded_yaw_rate": args.yaw_rate,
            "failure": result.failure,
            "wall_time_s": round(wall, 2),
        },
    )
    events_to_jsonl(result.events, out / "events.jsonl")
    r = result.report
    status = "fell" if r.fell else ("stationary" if r.cot is None else "ok")
    cot = "-" if r.cot is None else f"{r.cot:.2f}"
    print(
        f"{cfg.gait} v={args.velocity:.2f}: {status}, mean speed "
        f"{r.mean_speed:.3f} m/s, distance {r.distance:.2f} m, CoT {cot} J/m, "
        f"{r.step_count} steps ({wall:.0f}s wall)"
    )
    print(f"wrote {out / 'trace.csv'}, {out / 'report.json'}, {out / 'events.jsonl'}")
    return EXIT_DOMAIN if r.fell else EXIT_OK


def _write_sweep_outputs(records, grid, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    records_to_csv(records, out / "sweep_records.csv")
    comparison_to_csv(compare_gaits(records), out / "gait_comparison.csv")
    print(f"wrote {out / 'sweep_records.csv'} ({len(records)} records)")
    code = EXIT_OK
    try:
        lookup = build_lookup(records)
        lookup.to_json(out / "lookup.json")
        print(f"wrote {out / 'lookup.json'} ({len(lookup.entries)} buckets)")
    except EmptyBucketError as err:
        print(f"lookup not written: {err}", file=sys.stderr)
        code = EXIT_DOMAIN
    for gait in grid.gaits:
        for v in grid.velocities:
            if any(r.gait == gait and r.velocity == v and r.usable for r in records):
                path = out / f"contour_{gait}_{v:.2f}.csv"
                contour_export(records, v, gait, path=path)
    return code


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    grid = cfg.study.grid
    points = grid.points()
    print(f"sweep: {len(points)} runs of {grid.duration:.0f}s, {cfg.study.workers} worker(s)")
    t0 = time.time()

    def progress(rec):
        cot = "-" if rec.report.cot is None else f"{rec.report.cot:.1f}"
        print(
            f"[{time.time() - t0:7.1f}s] {rec.index + 1:4d}/{len(points)} "
            f"{rec.gait:4s} v={rec.velocity:.2f} -> {rec.status} cot={cot}",
            flush=True,
        )

    records = run_sweep(
        grid, desc=cfg.robot, sim_cfg=cfg.sim,
        workers=cfg.study.workers, progress=progress if not args.quiet else None,
    )
    return _write_sweep_outputs(records, grid, Path(args.out_dir))


def cmd_compare_gaits(args: argparse.Namespace) -> int:
    records = records_from_csv(Path(args.records))
    rows = compare_gaits(records)
    if not rows:
        print("no records", file=sys.stderr)
        return EXIT_DOMAIN
    print(f"{'v [m/s]':>8} {'walk CoT':>10} {'trot CoT':>10} {'walk ok':>8} {'trot ok':>8}")
    for r in rows:
        wc = "-" if r.walk_cot is None else f"{r.walk_cot:.2f}"
        tc = "-" if r.trot_cot is None else f"{r.trot_cot:.2f}"
        print(f"{r.velocity:8.2f} {wc:>10} {tc:>10} {str(r.walk_stable):>8} {str(r.trot_stable):>8}")
    if args.out_dir is not None:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        comparison_to_csv(rows, out / "gait_comparison.csv")
        print(f"wrote {out / 'gait_comparison.csv'}")
    return EXIT_OK


def cmd_contour(args: argparse.Namespace) -> int:
    records = records_from_csv(Path(args.records))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"contour_{args.gait}_{args.velocity:.2f}.csv"
    xs, ys, _ = contour_export(
        records, args.velocity, args.gait, x_field=args.x, y_field=args.y, path=path
    )
    if not xs:
        print(
            f"no {args.gait} records at v={args.velocity:.2f} with the other "
            "parameters at defaults",
            file=sys.stderr,
        )
        return EXIT_DOMAIN
    print(f"wrote {path} ({len(xs)}x{len(ys)} cells)")
    return EXIT_OK


def cmd_teleop(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.lookup is not None:
        cfg.teleop.lookup_path = args.lookup
    if args.replay is not None:
        from .teleop import run_scripted

        script = json.loads(Path(args.replay).read_text())
        segments = [tuple(s) for s in script["segments"]]
        duration = float(script.get("duration", 10.0))
        result = run_scripted(cfg, segments, duration)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace_to_csv(result.trace, cfg.robot, out / "trace.csv", every=args.every)
        report_to_json(result.report, out / "report.json", extra={"failure": result.failure})
        events_to_jsonl(result.events, out / "events.jsonl")
        print(f"replayed {args.replay}: fell={result.fell}; wrote {out / 'trace.csv'}")
        return EXIT_DOMAIN if result.fell else EXIT_OK
    from .teleop import serve

    print(f"teleop service on ws://{cfg.teleop.host}:{cfg.teleop.port}/ws")
    serve(cfg)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="quadloco", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, out_default="out"):
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", type=Path, default=Path(out_default))

    p = sub.add_parser("run", help="single closed-loop run")
    common(p)
    p.add_argument("--velocity", type=float, default=0.5, help="commanded vx [m/s]")
    p.add_argument("--vy", type=float, default=0.0)
    p.add_argument("--yaw-rate", type=float, default=0.0)
    p.add_argument("--duration", type=float, default=None, help="run length [s] (default 10)")
    p.add_argument("--gait", choices=("walk", "trot"), default=None)
    p.add_argument("--every", type=int, default=1, help="trace decimation (1 = every sample)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="parameter sweep over the study grid")
    common(p)
    p.add_argument("--duration", type=float, default=None, help="per-run length [s]")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("compare-gaits", help="walk-vs-trot table from records")
    p.add_argument("--records", type=Path, required=True, help="sweep records CSV")
    p.add_argument("--out-dir", type=Path, default=None)
    p.set_defaults(fn=cmd_compare_gaits)

    p = sub.add_parser("contour", help="CoT matrix over two parameters")
    p.add_argument("--records", type=Path, required=True, help="sweep records CSV")
    p.add_argument("--velocity", type=float, required=True)
    p.add_argument("--gait", choices=("walk", "trot"), default="trot")
    p.add_argument("--x", choices=SWEPT_FIELDS, default="swing_time")
    p.add_argument("--y", choices=SWEPT_FIELDS, default="ellipse_rx")
    p.add_argument("--out-dir", type=Path, default=Path("out"))
    p.set_defaults(fn=cmd_contour)

    p = sub.add_parser("teleop", help="live teleoperation service")
    common(p)
    p.add_argument("--lookup", type=str, default=None, help="lookup JSON for auto gait")
    p.add_argument("--replay", type=Path, default=None, help="velocity script JSON (headless)")
    p.add_argument("--every", type=int, default=1, help="replay trace decimation")
    p.set_defaults(fn=cmd_teleop)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
