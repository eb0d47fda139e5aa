#!/usr/bin/env python3
"""Simulate every scenario file and replay it through a fresh tracker; prints the alarm log."""

from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

from routewatch.device_sim import parse_scenario, run_scenario
from routewatch.tracker_service import ServiceConfig, TrackerService, replay

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("scenarios", nargs="*", type=Path, help="default: scenarios/*.scenario")
    parser.add_argument("--min-prefix-cells", type=int, default=50)
    args = parser.parse_args()

    paths = args.scenarios or sorted((ROOT / "scenarios").glob("*.scenario"))
    config = ServiceConfig(min_prefix_cells=args.min_prefix_cells, fsync=False)
    for path in paths:
        scenario = parse_scenario(path.read_text(encoding="utf-8"))
        events = run_scenario(scenario)
        with tempfile.TemporaryDirectory() as data_dir:
            service = TrackerService(data_dir, config)
            alarms = replay(service, [ev.to_line() for ev in events])
            n = service.device(scenario.device_id).matrix.n_trips
        print(f"== {scenario.name}: {len(events)} events, {n} trips learned, {len(alarms)} alarms")
        for line in alarms:
            print(f"   {line}")


if __name__ == "__main__":
    main()
