"""Child-device simulator: walking pings with GPS noise, battery drain, SOS and fix loss.

Noise is an isotropic Gaussian in the local tangent plane. ``sigma_m`` is the
2D RMS (DRMS) horizontal error, so each axis gets ``sigma_m / sqrt(2)``.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .geogrid import GeoPoint, format_coord, haversine_m, offset_m

COORD_DECIMALS = 7
STANDBY_DRAIN_FACTOR = 50.0 / 115.0  # 50 mW standby vs 115 mW continuous


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class RoutePlan:
    waypoints: tuple[GeoPoint, ...]
    speed_mps: float = 1.4
    ping_interval_s: int = 5

    def __post_init__(self) -> None:
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        if len(self.waypoints) < 2:
            raise SimulationError("a route needs at least two waypoints")
        for a, b in zip(self.waypoints, self.waypoints[1:]):
            if (a.lat, a.lon) == (b.lat, b.lon):
                raise SimulationError(f"consecutive duplicate waypoint ({a.lat}, {a.lon})")
        if self.speed_mps <= 0:
            raise SimulationError("speed_mps must be positive")
        if self.ping_interval_s <= 0:
            raise SimulationError("ping_interval_s must be positive")

    @property
    def segment_lengths(self) -> list[float]:
        return [haversine_m(a, b) for a, b in zip(self.waypoints, self.waypoints[1:])]

    @property
    def length_m(self) -> float:
        return sum(self.segment_lengths)

    @property
    def duration_s(self) -> float:
        return self.length_m / self.speed_mps

    def position_at_distance(self, d: float) -> GeoPoint:
        """Point ``d`` meters along the polyline, clamped to its ends.

        Interpolation is linear in lat/lon within each segment, so the result
        lies exactly on the lat/lon polyline.
        """
        if d <= 0:
            return self.waypoints[0]
        for (a, b), seg in zip(zip(self.waypoints, self.waypoints[1:]), self.segment_lengths):
            if d <= seg:
                f = d / seg
                return GeoPoint(a.lat + f * (b.lat - a.lat), a.lon + f * (b.lon - a.lon))
            d -= seg
        return self.waypoints[-1]

    def position_at(self, elapsed_s: float) -> GeoPoint:
        return self.position_at_distance(elapsed_s * self.speed_mps)


@dataclass(frozen=True)
class NoiseModel:
    sigma_m: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sigma_m < 0:
            raise SimulationError("sigma_m must be non-negative")

    def rng(self) -> random.Random:
        return random.Random(self.seed)

    def perturb(self, p: GeoPoint, rng: random.Random) -> GeoPoint:
        if self.sigma_m == 0:
            return p
        per_axis = self.sigma_m / math.sqrt(2.0)
        east = rng.gauss(0.0, per_axis)
        north = rng.gauss(0.0, per_axis)
        return offset_m(p, east, north)


OUTDOOR_NOISE = NoiseModel(10.0)
INDOOR_NOISE = NoiseModel(25.0)


@dataclass(frozen=True)
class BatteryModel:
    capacity_pct: float = 100.0
    hours_full_to_empty: float = 12.0
    lowbat_pct: float = 15.0
    mode: str = "continuous"

    def __post_init__(self) -> None:
        if not 0 <= self.capacity_pct <= 100:
            raise SimulationError("capacity_pct must be within 0..100")
        if self.hours_full_to_empty <= 0:
            raise SimulationError("hours_full_to_empty must be positive")
        if not 0 <= self.lowbat_pct <= 100:
            raise SimulationError("lowbat_pct must be within 0..100")
        if self.mode not in ("continuous", "standby"):
            raise SimulationError(f"unknown battery mode {self.mode!r}")

    @property
    def drain_pct_per_s(self) -> float:
        rate = 100.0 / (self.hours_full_to_empty * 3600.0)
        return rate * STANDBY_DRAIN_FACTOR if self.mode == "standby" else rate

    def charge_at(self, elapsed_s: float) -> float:
        return max(0.0, self.capacity_pct - self.drain_pct_per_s * elapsed_s)

    def lowbat_crossing_s(self) -> float | None:
        """Seconds until charge first reaches the warning level, or None if it starts there."""
        if self.capacity_pct <= self.lowbat_pct:
            return None
        return (self.capacity_pct - self.lowbat_pct) / self.drain_pct_per_s

    def empty_s(self) -> float:
        return self.capacity_pct / self.drain_pct_per_s


class EventKind(enum.Enum):
    PING = "PING"
    SOS = "SOS"
    LOWBAT = "LOWBAT"


@dataclass(frozen=True)
class DeviceEvent:
    kind: EventKind
    device_id: str
    point: GeoPoint | None
    battery_pct: int
    ts: int

    def to_line(self) -> str:
        if self.kind is EventKind.PING:
            assert self.point is not None
            lat = format_coord(self.point.lat, COORD_DECIMALS)
            lon = format_coord(self.point.lon, COORD_DECIMALS)
            return f"PING {self.device_id} {lat} {lon} {self.ts} {self.battery_pct}"
        if self.kind is EventKind.SOS:
            return f"SOS {self.device_id} {self.ts}"
        return f"LOWBAT {self.device_id} {self.battery_pct} {self.ts}"


def _wire_point(p: GeoPoint, ts: int) -> GeoPoint:
    # round to what the wire and CSV carry so every consumer sees the same float
    return GeoPoint(round(p.lat, COORD_DECIMALS), round(p.lon, COORD_DECIMALS), ts)


@dataclass
class DeviceState:
    """On-device memory: the last good fix survives reboots like an EEPROM cell."""

    device_id: str = "d1"
    last_known: GeoPoint | None = None
    battery_pct: int = 100

    def save(self, path: Path) -> None:
        path.write_text(format_lastknown(self.last_known))

    @classmethod
    def load(cls, path: Path, device_id: str = "d1") -> DeviceState:
        state = cls(device_id)
        if path.exists():
            state.last_known = parse_lastknown(path.read_text())
        return state


def format_lastknown(p: GeoPoint | None) -> str:
    if p is None:
        return "LASTKNOWN NOFIX\n"
    return f"LASTKNOWN {format_coord(p.lat, COORD_DECIMALS)} {format_coord(p.lon, COORD_DECIMALS)} {p.ts}\n"


def parse_lastknown(text: str) -> GeoPoint | None:
    parts = text.strip().split(" ")
    if parts == ["LASTKNOWN", "NOFIX"]:
        return None
    if len(parts) != 4 or parts[0] != "LASTKNOWN":
        raise ValueError(f"bad LASTKNOWN record {text!r}")
    return GeoPoint(float(parts[1]), float(parts[2]), int(parts[3]))


def trigger_sos(state: DeviceState, ts: int) -> DeviceEvent:
    """SOS carries the last good fix, or no point at all; never a fresh position."""
    return DeviceEvent(EventKind.SOS, state.device_id, state.last_known, state.battery_pct, ts)


def _in_windows(t: float, windows: Sequence[tuple[float, float]]) -> bool:
    return any(start <= t < end for start, end in windows)


def simulate_track(
    plan: RoutePlan,
    noise: NoiseModel = OUTDOOR_NOISE,
    battery: BatteryModel = BatteryModel(),
    duration_s: float | None = None,
    *,
    device_id: str = "d1",
    start_ts: int = 0,
    fix_loss: Sequence[tuple[float, float]] = (),
    sos_at: Iterable[float] = (),
    state: DeviceState | None = None,
) -> list[DeviceEvent]:
    """Walk ``plan`` and return the device's event stream in time order.

    A PING is emitted every ``ping_interval_s`` from t=0 up to ``duration_s``
    (default: time to walk the route; afterwards the device stands at the
    last waypoint). Pings are suppressed inside ``fix_loss`` windows and once
    the battery is empty. One LOWBAT is emitted at the warning-level crossing.
    ``sos_at`` offsets produce SOS events. ``state`` carries the last-known
    fix in and out of the run.
    """
    if plan.length_m == 0:
        raise SimulationError("route has zero length")
    if duration_s is None:
        duration_s = plan.duration_s
    if state is None:
        state = DeviceState(device_id)
    state.device_id = device_id
    rng = noise.rng()
    dead_at = battery.empty_s()

    # (offset, order, kind); pings sort before other events at the same second
    schedule: list[tuple[int, int, EventKind]] = []
    t = 0
    while t <= duration_s:
        schedule.append((t, 0, EventKind.PING))
        t += plan.ping_interval_s
    crossing = battery.lowbat_crossing_s()
    if crossing is not None and crossing <= duration_s:
        schedule.append((math.ceil(crossing), 1, EventKind.LOWBAT))
    for s in sos_at:
        if 0 <= s <= duration_s:
            schedule.append((int(s), 2, EventKind.SOS))
    schedule.sort(key=lambda e: (e[0], e[1]))

    events: list[DeviceEvent] = []
    for offset, _, kind in schedule:
        ts = start_ts + offset
        state.battery_pct = round(battery.charge_at(offset))
        if kind is EventKind.PING:
            if offset >= dead_at or _in_windows(offset, fix_loss):
                continue
            point = _wire_point(noise.perturb(plan.position_at(offset), rng), ts)
            state.last_known = point
            events.append(DeviceEvent(kind, device_id, point, state.battery_pct, ts))
        elif kind is EventKind.SOS:
            events.append(trigger_sos(state, ts))
        else:
            events.append(DeviceEvent(kind, device_id, state.last_known, state.battery_pct, ts))
    return events


def inject_deviation(
    events: Sequence[DeviceEvent],
    at_fraction: float,
    detour: RoutePlan,
    noise: NoiseModel | None = None,
) -> list[DeviceEvent]:
    """Re-route every PING from ``at_fraction`` of the timeline onward along ``detour``.

    The detour is walked from its first waypoint starting at the splice time;
    timestamps and battery readings are kept. Later SOS/LOWBAT events are
    re-pointed at the last PING before them.
    """
    if not 0.0 <= at_fraction <= 1.0:
        raise SimulationError("at_fraction must be within [0, 1]")
    if not events:
        return []
    noise = noise if noise is not None else NoiseModel(0.0)
    rng = noise.rng()
    t0, t1 = events[0].ts, events[-1].ts
    splice = t0 + at_fraction * (t1 - t0)
    out: list[DeviceEvent] = []
    last: GeoPoint | None = None
    for ev in events:
        if ev.ts < splice:
            out.append(ev)
            if ev.kind is EventKind.PING:
                last = ev.point
            continue
        if ev.kind is EventKind.PING:
            moved = noise.perturb(detour.position_at(ev.ts - splice), rng)
            ev = replace(ev, point=_wire_point(moved, ev.ts))
            last = ev.point
        elif last is not None:
            ev = replace(ev, point=last)
        out.append(ev)
    return out


def perpendicular_detour(plan: RoutePlan, at_fraction: float, offset: float, left: bool = True) -> RoutePlan:
    """Route that leaves ``plan`` at ``at_fraction`` of its length, steps ``offset``
    meters sideways and then runs parallel to the rest of the route."""
    d_split = at_fraction * plan.length_m
    start = plan.position_at_distance(d_split)
    ahead = plan.position_at_distance(min(d_split + 1.0, plan.length_m))
    if (ahead.lat, ahead.lon) == (start.lat, start.lon):
        ahead = plan.waypoints[-1]
    # unit direction in the local plane
    north = math.radians(ahead.lat - start.lat) * 6_371_000.0
    east = math.radians(ahead.lon - start.lon) * 6_371_000.0 * math.cos(math.radians(start.lat))
    norm = math.hypot(east, north)
    if norm == 0:
        raise SimulationError("cannot find route direction at the splice point")
    side = 1.0 if left else -1.0
    perp_e, perp_n = -north / norm * offset * side, east / norm * offset * side

    points = [start, offset_m(start, perp_e, perp_n)]
    travelled = 0.0
    for a, seg in zip(plan.waypoints[1:], plan.segment_lengths):
        travelled += seg
        if travelled > d_split + 1e-9:
            shifted = offset_m(a, perp_e, perp_n)
            if (shifted.lat, shifted.lon) != (points[-1].lat, points[-1].lon):
                points.append(shifted)
    return RoutePlan(tuple(points), plan.speed_mps, plan.ping_interval_s)


# -- scenario files ------------------------------------------------------------

class ScenarioError(ValueError):
    def __init__(self, message: str, keys: Sequence[str] = ()) -> None:
        super().__init__(message)
        self.keys = list(keys)


@dataclass
class Scenario:
    """One reproducible run: ``train_trips`` daily commutes, then the featured trip."""

    name: str = "scenario"
    device_id: str = "d1"
    start_ts: int = 1_700_000_000
    waypoints: tuple[GeoPoint, ...] = ()
    speed_mps: float = 1.4
    ping_interval_s: int = 5
    sigma_m: float = 10.0
    seed: int = 0
    train_trips: int = 5
    battery_pct: float = 100.0
    hours_full_to_empty: float = 12.0
    lowbat_pct: float = 15.0
    battery_mode: str = "continuous"
    duration_s: float | None = None
    detour_at: float | None = None
    detour_offset_m: float = 300.0
    fix_loss: tuple[tuple[float, float], ...] = ()
    sos_at: tuple[float, ...] = ()

    @property
    def plan(self) -> RoutePlan:
        return RoutePlan(self.waypoints, self.speed_mps, self.ping_interval_s)


def _parse_waypoints(text: str) -> tuple[GeoPoint, ...]:
    points = []
    for chunk in text.split(";"):
        lat, lon = chunk.split(",")
        points.append(GeoPoint(float(lat), float(lon)))
    return tuple(points)


def _parse_windows(text: str) -> tuple[tuple[float, float], ...]:
    windows = []
    for chunk in filter(None, (c.strip() for c in text.split(","))):
        start, end = chunk.split("-")
        if float(end) <= float(start):
            raise ValueError(f"empty window {chunk!r}")
        windows.append((float(start), float(end)))
    return tuple(windows)


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(c) for c in text.split(",") if c.strip())


_SCENARIO_KEYS = {
    "name": str,
    "device_id": str,
    "start_ts": int,
    "waypoints": _parse_waypoints,
    "speed_mps": float,
    "ping_interval_s": int,
    "sigma_m": float,
    "seed": int,
    "train_trips": int,
    "battery_pct": float,
    "hours_full_to_empty": float,
    "lowbat_pct": float,
    "battery_mode": str,
    "duration_s": float,
    "detour_at": float,
    "detour_offset_m": float,
    "fix_loss": _parse_windows,
    "sos_at": _parse_floats,
}


def parse_scenario(text: str) -> Scenario:
    """Parse ``key = value`` lines ('#' starts a comment).

    Unknown keys and unparseable values are collected and reported together.
    """
    values: dict[str, object] = {}
    bad: list[str] = []
    problems: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key = value")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        conv = _SCENARIO_KEYS.get(key)
        if conv is None:
            bad.append(key)
            continue
        try:
            values[key] = conv(value)
        except (ValueError, TypeError) as exc:
            bad.append(key)
            problems.append(f"{key}: {exc}")
    if "waypoints" not in values and "waypoints" not in bad:
        bad.append("waypoints")
        problems.append("waypoints: required")
    if bad or problems:
        raise ScenarioError("invalid scenario: " + "; ".join(problems or [f"unknown key(s) {', '.join(bad)}"]), bad)
    sc = Scenario(**values)  # type: ignore[arg-type]
    try:
        sc.plan
        BatteryModel(sc.battery_pct, sc.hours_full_to_empty, sc.lowbat_pct, sc.battery_mode)
        NoiseModel(sc.sigma_m)
    except (SimulationError, ValueError) as exc:
        raise ScenarioError(f"invalid scenario: {exc}") from exc
    if sc.detour_at is not None and not 0.0 <= sc.detour_at <= 1.0:
        raise ScenarioError("invalid scenario: detour_at must be within [0, 1]", ["detour_at"])
    if sc.train_trips < 0:
        raise ScenarioError("invalid scenario: train_trips must be >= 0", ["train_trips"])
    return sc


def run_scenario(sc: Scenario) -> list[DeviceEvent]:
    """Training commutes on consecutive days, then the featured trip on the next day."""
    plan = sc.plan
    state = DeviceState(sc.device_id)
    events: list[DeviceEvent] = []
    for k in range(sc.train_trips):
        events += simulate_track(
            plan,
            NoiseModel(sc.sigma_m, sc.seed * 1000 + k + 1),
            BatteryModel(100.0, sc.hours_full_to_empty, sc.lowbat_pct, sc.battery_mode),
            sc.duration_s,
            device_id=sc.device_id,
            start_ts=sc.start_ts + k * 86_400,
            state=state,
        )
    noise = NoiseModel(sc.sigma_m, sc.seed * 1000)
    battery = BatteryModel(sc.battery_pct, sc.hours_full_to_empty, sc.lowbat_pct, sc.battery_mode)
    featured = simulate_track(
        plan,
        noise,
        battery,
        sc.duration_s,
        device_id=sc.device_id,
        start_ts=sc.start_ts + sc.train_trips * 86_400,
        fix_loss=sc.fix_loss,
        sos_at=sc.sos_at,
        state=state,
    )
    if sc.detour_at is not None:
        detour = perpendicular_detour(plan, sc.detour_at, sc.detour_offset_m)
        featured = inject_deviation(featured, sc.detour_at, detour, NoiseModel(sc.sigma_m, sc.seed * 1000 + 999))
    return events + featured


def ping_points(events: Iterable[DeviceEvent]) -> list[GeoPoint]:
    return [ev.point for ev in events if ev.kind is EventKind.PING and ev.point is not None]
