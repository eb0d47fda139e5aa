"""Command line entry point: learn, score, simulate, serve, inspect.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .device_sim import ScenarioError, SimulationError, parse_scenario, ping_points, run_scenario
from .geogrid import GridConfig, cell_bounds, quantize
from .ingest import NmeaError, SegmentationConfig, TrackError, read_track, segment_trips, write_csv_track
from .route_model import (
    DeviationConfig,
    DuplicateTripError,
    MatrixFormatError,
    ProbabilityMatrix,
    cell_histogram,
    cell_probability,
    dumps_matrix,
    is_deviation,
    loads_matrix,
    score_route,
)
from .tracker_service import ServiceConfig, TrackerServer, TrackerService, atomic_write, replay

log = logging.getLogger("routewatch")


class CommandError(Exception):
    """Operational failure; reported on stderr with exit code 1."""


def _deviation_config(args: argparse.Namespace) -> DeviationConfig:
    base = DeviationConfig()
    return DeviationConfig(
        threshold=args.threshold if args.threshold is not None else base.threshold,
        min_trips=args.min_trips if args.min_trips is not None else base.min_trips,
        min_days=args.min_days if args.min_days is not None else base.min_days,
        retention_days=args.retention_days if args.retention_days is not None else base.retention_days,
    )


def _segmentation_config(args: argparse.Namespace) -> SegmentationConfig:
    return SegmentationConfig(args.gap_seconds, args.min_pings)


def _read_track_file(path: Path, date: dt.date | None):
    try:
        return read_track(path.read_text(encoding="utf-8"), date)
    except (TrackError, NmeaError) as exc:
        raise CommandError(f"{path}:{str(exc).removeprefix('line ')}") from exc


def _load_matrix(path: Path) -> ProbabilityMatrix:
    try:
        return loads_matrix(path.read_text(encoding="utf-8"))
    except MatrixFormatError as exc:
        raise CommandError(f"{path}: {exc}") from exc


def cmd_learn(args: argparse.Namespace) -> int:
    grid = GridConfig(args.decimals)
    seg = _segmentation_config(args)
    matrix = ProbabilityMatrix(grid)
    discarded = 0
    for path in args.tracks:
        points = _read_track_file(path, args.date)
        result = segment_trips(points, seg, grid)
        discarded += len(result.discarded)
        for trip in result.trips:
            try:
                matrix.record(trip)
            except DuplicateTripError as exc:
                raise CommandError(f"{path}: {exc}") from exc
    if matrix.n_trips == 0:
        raise CommandError("no valid trips found; nothing written")
    if args.now is not None:
        matrix.prune(args.now, _deviation_config(args))

    out = args.out or Path(args.data_dir) / f"{args.device_id}.pmatrix"
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(out, dumps_matrix(matrix))

    print(f"N={matrix.n_trips} cells={len(matrix.counts)} discarded_runs={discarded} d={grid.decimals}")
    for trip in sorted(matrix.trips.values(), key=lambda t: (t.start_ts, t.trip_id)):
        print(f"trip {trip.trip_id} start={trip.start_ts} end={trip.end_ts} cells={len(trip.cells)}")
    hist = cell_histogram(matrix)
    print("figure_values " + " ".join(f"{value}:{hist[value]}" for value in sorted(hist)))
    print(f"wrote {out}")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    matrix = _load_matrix(args.matrix)
    points = _read_track_file(args.track, args.date)
    if not points:
        raise CommandError(f"{args.track}: track has no points")
    cfg = _deviation_config(args)
    score = score_route(matrix, (quantize(p, matrix.grid) for p in points))
    now = args.now
    if now is None:
        now = max(points[-1].ts, matrix.last_trip_ts() or 0)
    verdict = is_deviation(matrix, score, cfg, now=now).value
    if args.machine:
        print(
            f"verdict={verdict} normalized={score.normalized:.6f} log_likelihood={score.log_likelihood:.6f}"
            f" raw_product={score.raw_product:.6e} cells={score.cell_count} N={matrix.n_trips}"
        )
    else:
        print(f"trips in model (N):   {matrix.n_trips}")
        print(f"cells on route (L):   {score.cell_count}")
        print(f"route probability P': {score.raw_product:.6e}")
        print(f"log-likelihood:       {score.log_likelihood:.6f}")
        print(f"normalized score:     {score.normalized:.6f}  (threshold {cfg.threshold})")
        print(f"verdict:              {verdict}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        scenario = parse_scenario(args.scenario.read_text(encoding="utf-8"))
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.keys:
            print("offending keys: " + ", ".join(exc.keys), file=sys.stderr)
        return 2
    if args.seed is not None:
        scenario.seed = args.seed
    try:
        events = run_scenario(scenario)
    except SimulationError as exc:
        raise CommandError(str(exc)) from exc
    args.out.mkdir(parents=True, exist_ok=True)
    track_path = args.out / f"{scenario.name}.csv"
    events_path = args.out / f"{scenario.name}.events"
    atomic_write(track_path, write_csv_track(ping_points(events)), fsync=False)
    atomic_write(events_path, "".join(ev.to_line() + "\n" for ev in events), fsync=False)
    pings = sum(1 for ev in events if ev.kind.value == "PING")
    print(f"events={len(events)} pings={pings} seed={scenario.seed}")
    print(f"wrote {track_path}")
    print(f"wrote {events_path}")
    return 0


def _service_config(args: argparse.Namespace) -> ServiceConfig:
    return ServiceConfig(
        deviation=_deviation_config(args),
        segmentation=_segmentation_config(args),
        grid=GridConfig(args.decimals),
        min_prefix_cells=args.min_prefix_cells,
    )


def cmd_serve(args: argparse.Namespace) -> int:
    config = _service_config(args)
    if args.replay is not None:
        service = TrackerService(args.data_dir, config)
        alarms = replay(service, args.replay.read_text(encoding="utf-8").splitlines())
        text = "".join(f"{line}\n" for line in alarms)
        if args.alarm_log is not None:
            atomic_write(args.alarm_log, text, fsync=False)
        else:
            sys.stdout.write(text)
        return 0

    host, _, port = args.listen.rpartition(":")
    sink = None
    if args.alarm_log is not None:
        fh = open(args.alarm_log, "a", encoding="utf-8")

        def sink(line: str) -> None:
            fh.write(line + "\n")
            fh.flush()

    service = TrackerService(args.data_dir, config, alarm_sink=sink)
    with TrackerServer((host or "127.0.0.1", int(port)), service) as server:
        print(f"listening on {server.server_address[0]}:{server.server_address[1]}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            service.flush()
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    matrix = _load_matrix(args.matrix)
    grid = matrix.grid
    print(f"d={grid.decimals} N={matrix.n_trips} cells={len(matrix.counts)}")
    if not matrix.counts:
        return 0
    hist = cell_histogram(matrix)
    print("figure_values " + " ".join(f"{value}:{hist[value]}" for value in sorted(hist)))
    ranked = sorted(matrix.counts.items(), key=lambda kv: (-kv[1], kv[0]))
    width = 40
    print(f"{'i':>10} {'j':>11} {'sw_lat':>11} {'sw_lon':>12} {'fig':>4} {'P':>7}")
    for cell, count in ranked[: args.top]:
        sw, _ = cell_bounds(cell, grid)
        p = cell_probability(matrix, cell)
        bar = "#" * round(p * width)
        print(f"{cell.i:>10} {cell.j:>11} {sw.lat:>11.{grid.decimals}f} {sw.lon:>12.{grid.decimals}f}"
              f" {count + 1:>4} {p:>7.3f} {bar}")
    if args.map:
        _print_map(matrix)
    return 0


_SHADES = " .:-=+*#%@"


def _print_map(matrix: ProbabilityMatrix, max_width: int = 120, max_height: int = 60) -> None:
    """Top-down percent map: north up, one character per cell."""
    cells = matrix.counts
    i_lo, i_hi = min(c.i for c in cells), max(c.i for c in cells)
    j_lo, j_hi = min(c.j for c in cells), max(c.j for c in cells)
    if j_hi - j_lo + 1 > max_width or i_hi - i_lo + 1 > max_height:
        print(f"map skipped: {i_hi - i_lo + 1}x{j_hi - j_lo + 1} cells exceeds {max_height}x{max_width}")
        return
    n = max(matrix.n_trips, 1)
    for i in range(i_hi, i_lo - 1, -1):
        row = []
        for j in range(j_lo, j_hi + 1):
            c = cells.get((i, j), 0)
            row.append(_SHADES[min(len(_SHADES) - 1, round(c / n * (len(_SHADES) - 1)))] if c else " ")
        print("".join(row).rstrip())


def _date_arg(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM-DD, got {text!r}") from None


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold", type=float, help="alarm when the normalized score falls below this (default 0.4)")
    p.add_argument("--min-trips", type=int, help="trips needed before alarms are armed (default 3)")
    p.add_argument("--min-days", type=int, help="calendar days of learning before alarms are armed (default 3)")
    p.add_argument("--retention-days", type=int, help="days a trip stays in the model (default 120)")


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--decimals", type=int, default=4, help="grid resolution in decimal places (default 4, about 11 m)")
    p.add_argument("--gap-seconds", type=int, default=600, help="silence that ends a trip (default 600)")
    p.add_argument("--min-pings", type=int, default=5, help="shortest trip kept, in pings (default 5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="routewatch", description="Learn habitual GPS routes and flag deviations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn", help="build a probability matrix from track files (CSV or NMEA)")
    p.add_argument("tracks", nargs="+", type=Path)
    p.add_argument("--data-dir", default=".", help="where <device-id>.pmatrix is written (default .)")
    p.add_argument("--device-id", default="d1")
    p.add_argument("--out", type=Path, help="explicit output path, overrides --data-dir/--device-id")
    p.add_argument("--date", type=_date_arg, help="date for NMEA logs without RMC sentences")
    p.add_argument("--now", type=int, help="apply the retention window relative to this epoch time")
    _add_grid_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("score", help="score a track against a matrix")
    p.add_argument("matrix", type=Path)
    p.add_argument("track", type=Path)
    p.add_argument("--date", type=_date_arg, help="date for NMEA logs without RMC sentences")
    p.add_argument("--now", type=int, help="evaluation time for arming (default: latest of track and model)")
    p.add_argument("--machine", action="store_true", help="single key=value line")
    _add_model_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("simulate", help="run a scenario file, writing <name>.csv and <name>.events")
    p.add_argument("scenario", type=Path)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (default .)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="run the tracker service (TCP, or --replay an event log)")
    p.add_argument("--listen", default="127.0.0.1:7878", help="host:port (default 127.0.0.1:7878)")
    p.add_argument("--data-dir", type=Path, default=Path("data"), help="per-device state directory (default ./data)")
    p.add_argument("--replay", type=Path, help="feed this event log instead of listening")
    p.add_argument("--alarm-log", type=Path, help="write ALARM lines here (replay default: stdout)")
    p.add_argument("--min-prefix-cells", type=int, default=50,
                   help="distinct cells a live trip needs before it may alarm (default 50)")
    _add_grid_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("inspect", help="dump a matrix: histogram, top cells, optional ASCII map")
    p.add_argument("matrix", type=Path)
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--map", action="store_true", help="print a north-up shaded map of visited cells")
    p.set_defaults(func=cmd_inspect)
    return parser


def _validate(args: argparse.Namespace) -> None:
    """Build every config the command will use so bad values fail before any I/O."""
    if hasattr(args, "threshold"):
        _deviation_config(args)
    if hasattr(args, "decimals"):
        GridConfig(args.decimals)
        _segmentation_config(args)
    if getattr(args, "min_prefix_cells", 1) < 1:
        raise ValueError("--min-prefix-cells must be >= 1")
    if getattr(args, "top", 1) < 0:
        raise ValueError("--top must be >= 0")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _validate(args)
    except ValueError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CommandError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
