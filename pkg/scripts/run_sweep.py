#!/usr/bin/env python3
"""Run a parameter sweep and write records, lookup, comparison, and contours.

The coarse preset is the one the shipped artifacts in data/ come from:

    python3 scripts/run_sweep.py --preset coarse --out-dir data
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from quadloco.study import (
    SweepGrid,
    build_lookup,
    compare_gaits,
    comparison_to_csv,
    contour_export,
    records_to_csv,
    run_sweep,
)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", choices=("coarse", "default"), default="coarse")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--duration", type=float, default=None, help="override run length [s]")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", type=Path, default=Path("data"))
    args = ap.parse_args()

    grid = SweepGrid.coarse() if args.preset == "coarse" else SweepGrid()
    grid.seed = args.seed
    if args.duration is not None:
        grid.duration = args.duration
    points = grid.points()
    print(f"{args.preset} grid: {len(points)} runs of {grid.duration:.0f}s", flush=True)

    t0 = time.time()

    def report(rec):
        print(
            f"[{time.time() - t0:7.1f}s] {rec.index:4d} {rec.gait:4s} "
            f"v={rec.velocity:.2f} st={rec.params.swing_time:.2f} "
            f"sh={rec.params.step_height:.3f} rx={rec.params.ellipse_rx:.2f} "
            f"-> {rec.status}"
            + (f" cot={rec.report.cot:.1f}" if rec.report.cot is not None else ""),
            flush=True,
        )

    records = run_sweep(grid, workers=args.workers, progress=report)

    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    records_to_csv(records, out / f"{args.preset}_sweep.csv")
    lookup = build_lookup(records)
    lookup.to_json(out / "lookup.json")
    comparison_to_csv(compare_gaits(records), out / "gait_comparison.csv")
    for gait in grid.gaits:
        for v in grid.velocities:
            if any(r.gait == gait and r.velocity == v and r.usable for r in records):
                contour_export(
                    records, v, gait,
                    path=out / f"contour_{gait}_{v:.2f}.csv",
                )
    print(f"done in {time.time() - t0:.0f}s; artifacts in {out}/", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
