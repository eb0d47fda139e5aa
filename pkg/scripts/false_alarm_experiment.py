#!/usr/bin/env python3
"""Train on noisy commutes, then count DEVIATION alarms on clean and detoured replays.

    python scripts/false_alarm_experiment.py
    python scripts/false_alarm_experiment.py --seeds 1-20 --warmup 20 40 50
"""

from __future__ import annotations

import argparse
import math
import statistics
import time

from routewatch.experiments import false_alarm_experiment
from routewatch.tracker_service import ServiceConfig


def seed_range(text: str) -> list[int]:
    lo, _, hi = text.partition("-")
    return list(range(int(lo), int(hi or lo) + 1))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=seed_range, default=[7], help="seed or range, e.g. 1-20 (default 7)")
    parser.add_argument("--warmup", type=int, nargs="+", default=[50], help="min_prefix_cells values to sweep")
    parser.add_argument("--train-trips", type=int, default=5)
    parser.add_argument("--replays", type=int, default=50)
    parser.add_argument("--sigma", type=float, default=10.0, help="horizontal RMS noise, metres")
    parser.add_argument("--detour", type=float, default=300.0, help="perpendicular detour length, metres")
    args = parser.parse_args()

    print(f"{'warmup':>6} {'seed':>5} {'false':>7} {'caught':>7} {'median detour score':>20} {'secs':>6}")
    for warmup in args.warmup:
        config = ServiceConfig(min_prefix_cells=warmup, fsync=False)
        for seed in args.seeds:
            t0 = time.perf_counter()
            r = false_alarm_experiment(args.train_trips, args.replays, args.sigma, args.detour, seed, config)
            scores = [s for s in r.detour_scores if not math.isnan(s)]
            median = f"{statistics.median(scores):.4f}" if scores else "-"
            print(
                f"{warmup:>6} {seed:>5} {r.normal_alarms:>3}/{r.normal_runs:<3} "
                f"{r.detour_alarms:>3}/{r.detour_runs:<3} {median:>20} {time.perf_counter() - t0:>6.1f}"
            )


if __name__ == "__main__":
    main()
