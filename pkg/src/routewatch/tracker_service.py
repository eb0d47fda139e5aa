"""Parent-side tracker: line protocol, per-device matrices, online deviation alarms.

Wire protocol (UTF-8, LF, space separated)::

    device -> service   PING <id> <lat> <lon> <ts> <batt> | SOS <id> <ts> | LOWBAT <id> <batt> <ts>
    parent -> service   BIND <id> <parent_id> | CONFIG <id> <key>=<val> | TRACK <id> on|off
                        LISTEN <id> on|off | STATUS <id> | CLOSETRIP <id>
    service -> parent   POS <id> <lat> <lon> <ts>
                        ALARM DEVIATION <id> <score> <lat> <lon> <ts>
                        ALARM SOS <id> <lat|NOFIX> <lon|-> <ts>
                        ALARM LOWBAT <id> <batt> <lat|NOFIX> <lon|-> <ts>
    responses           OK[ payload] | ERR <CODE> <detail>

Per device the data directory holds ``<id>.pmatrix``, ``<id>.lastknown`` and
``<id>.conf`` (parent binding and CONFIG overrides).
"""

from __future__ import annotations

import logging
import math
import os
import re
import socketserver
import tempfile
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

from .device_sim import COORD_DECIMALS, format_lastknown, parse_lastknown
from .geogrid import DEFAULT_GRID, GeoPoint, GridConfig, format_coord, quantize
from .ingest import SegmentationConfig
from .route_model import (
    Decision,
    DeviationConfig,
    ProbabilityMatrix,
    ScoreAccumulator,
    Trip,
    dumps_matrix,
    is_armed,
    is_deviation,
    loads_matrix,
)

log = logging.getLogger(__name__)

MAX_LINE_BYTES = 1024


@dataclass(frozen=True)
class ServiceConfig:
    deviation: DeviationConfig = DeviationConfig()
    segmentation: SegmentationConfig = SegmentationConfig()
    grid: GridConfig = DEFAULT_GRID
    # a live prefix may only alarm once it spans this many distinct cells
    min_prefix_cells: int = 50
    fsync: bool = True


class ProtocolError(Exception):
    def __init__(self, code: str, detail: str = "") -> None:
        super().__init__(f"{code} {detail}".strip())
        self.code = code
        self.detail = detail

    def line(self) -> str:
        return f"ERR {self.code} {self.detail}".rstrip()


def atomic_write(path: Path, text: str, fsync: bool = True) -> None:
    """Replace ``path`` so readers see either the old or the new content."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            if fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _fmt_point(p: GeoPoint | None) -> str:
    if p is None:
        return "NOFIX -"
    return f"{format_coord(p.lat, COORD_DECIMALS)} {format_coord(p.lon, COORD_DECIMALS)}"


class Session:
    """One connection. ``push`` delivers unsolicited lines (POS, ALARM)."""

    def __init__(self, push: Callable[[str], None] | None = None, name: str = "") -> None:
        self.name = name
        self.bound: dict[str, str] = {}
        self.outbox: list[str] = []
        self._push = push
        self._lock = threading.Lock()

    def push(self, line: str) -> None:
        with self._lock:
            if self._push is None:
                self.outbox.append(line)
            else:
                self._push(line)

    def drain(self) -> list[str]:
        with self._lock:
            out, self.outbox = self.outbox, []
        return out


@dataclass
class DeviceRecord:
    device_id: str
    matrix: ProbabilityMatrix
    deviation: DeviationConfig
    segmentation: SegmentationConfig
    min_prefix_cells: int
    last_known: GeoPoint | None = None
    parent_id: str | None = None
    parent_session: Session | None = None
    battery_pct: int | None = None
    tracking: bool = False
    listening: bool = False
    open_trip: list[GeoPoint] = field(default_factory=list)
    accumulator: ScoreAccumulator | None = None
    latched: bool = False
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def armed(self, now: int | None = None) -> bool:
        return is_armed(self.matrix, self.deviation, now)


_CONFIG_KEYS: dict[str, tuple[str, type]] = {
    "threshold": ("deviation", float),
    "min_trips": ("deviation", int),
    "min_days": ("deviation", int),
    "retention_days": ("deviation", int),
    "gap_seconds": ("segmentation", int),
    "min_pings": ("segmentation", int),
    "min_prefix_cells": ("device", int),
}


_TOKEN = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.-]{0,63}\Z")


def _parse_token(text: str, what: str) -> str:
    # device ids double as file names, so keep them to a safe alphabet
    if not _TOKEN.match(text):
        raise ProtocolError("BADARG", f"bad {what}")
    return text


def _parse_int(text: str, what: str) -> int:
    if not text.lstrip("-").isdigit() or not text.isascii():
        raise ProtocolError("BADARG", f"bad {what} {text!r}")
    return int(text)


def _parse_coord(text: str, what: str, limit: float) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ProtocolError("BADARG", f"bad {what} {text!r}") from None
    if not math.isfinite(value) or abs(value) > limit or not text.isascii():
        raise ProtocolError("BADARG", f"{what} {text!r} out of range")
    return value


class TrackerService:
    """Holds every device's state; safe to drive from many session threads.

    Device creation is guarded by a service lock; each device is then mutated
    under its own lock only, so different devices proceed in parallel.
    """

    def __init__(
        self,
        data_dir: Path | str | None = None,
        config: ServiceConfig = ServiceConfig(),
        alarm_sink: Callable[[str], None] | None = None,
    ) -> None:
        self.data_dir = Path(data_dir) if data_dir is not None else None
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.devices: dict[str, DeviceRecord] = {}
        self.alarm_log: list[str] = []
        self._alarm_sink = alarm_sink
        self._lock = threading.Lock()
        self._alarm_lock = threading.Lock()

    # -- state & persistence -------------------------------------------------

    def _path(self, device_id: str, suffix: str) -> Path:
        assert self.data_dir is not None
        return self.data_dir / f"{device_id}.{suffix}"

    def device(self, device_id: str) -> DeviceRecord:
        with self._lock:
            rec = self.devices.get(device_id)
            if rec is None:
                rec = self._load_device(device_id)
                self.devices[device_id] = rec
            return rec

    def _load_device(self, device_id: str) -> DeviceRecord:
        cfg = self.config
        rec = DeviceRecord(
            device_id,
            ProbabilityMatrix(cfg.grid),
            cfg.deviation,
            cfg.segmentation,
            cfg.min_prefix_cells,
        )
        if self.data_dir is None:
            return rec
        mpath = self._path(device_id, "pmatrix")
        if mpath.exists():
            rec.matrix = loads_matrix(mpath.read_text(encoding="utf-8"))
        lpath = self._path(device_id, "lastknown")
        if lpath.exists():
            rec.last_known = parse_lastknown(lpath.read_text(encoding="utf-8"))
        cpath = self._path(device_id, "conf")
        if cpath.exists():
            for line in cpath.read_text(encoding="utf-8").splitlines():
                key, _, value = line.partition("=")
                if key == "parent":
                    rec.parent_id = value
                elif key in _CONFIG_KEYS:
                    self._apply_config(rec, key, value)
        return rec

    def _save_lastknown(self, rec: DeviceRecord) -> None:
        if self.data_dir is not None:
            atomic_write(self._path(rec.device_id, "lastknown"), format_lastknown(rec.last_known), fsync=False)

    def _save_conf(self, rec: DeviceRecord) -> None:
        if self.data_dir is None:
            return
        lines = []
        if rec.parent_id is not None:
            lines.append(f"parent={rec.parent_id}")
        base = self.config
        for key in _CONFIG_KEYS:
            value = self._config_value(rec, key)
            default = self._config_value_of(base.deviation, base.segmentation, base.min_prefix_cells, key)
            if value != default:
                lines.append(f"{key}={value}")
        atomic_write(self._path(rec.device_id, "conf"), "".join(f"{ln}\n" for ln in lines), self.config.fsync)

    @staticmethod
    def _config_value_of(dev: DeviationConfig, seg: SegmentationConfig, prefix: int, key: str) -> object:
        if key == "gap_seconds":
            return seg.gap_seconds
        if key == "min_pings":
            return seg.min_pings_per_trip
        if key == "min_prefix_cells":
            return prefix
        return getattr(dev, key)

    def _config_value(self, rec: DeviceRecord, key: str) -> object:
        return self._config_value_of(rec.deviation, rec.segmentation, rec.min_prefix_cells, key)

    def _apply_config(self, rec: DeviceRecord, key: str, value: str) -> None:
        group, conv = _CONFIG_KEYS[key]
        try:
            parsed = conv(value)
            if group == "deviation":
                rec.deviation = replace(rec.deviation, **{key: parsed})
            elif key == "gap_seconds":
                rec.segmentation = replace(rec.segmentation, gap_seconds=parsed)
            elif key == "min_pings":
                rec.segmentation = replace(rec.segmentation, min_pings_per_trip=parsed)
            else:
                if parsed < 1:
                    raise ValueError("min_prefix_cells must be >= 1")
                rec.min_prefix_cells = parsed
        except (ValueError, TypeError) as exc:
            raise ProtocolError("BADVALUE", f"{key}: {exc}") from None

    # -- alarms --------------------------------------------------------------

    def _alarm(self, rec: DeviceRecord, line: str) -> None:
        with self._alarm_lock:
            self.alarm_log.append(line)
            if self._alarm_sink is not None:
                self._alarm_sink(line)
        if rec.parent_session is not None:
            rec.parent_session.push(line)

    # -- trips ---------------------------------------------------------------

    def close_trip(self, device_id: str, reason: str = "explicit") -> Trip | None:
        """Validate and learn the device's open trip; returns the recorded Trip or None."""
        rec = self.device(device_id)
        with rec.lock:
            return self._close_trip(rec, reason)

    def _close_trip(self, rec: DeviceRecord, reason: str) -> Trip | None:
        pings, rec.open_trip = rec.open_trip, []
        rec.accumulator = None
        rec.latched = False
        if not pings:
            return None
        if len(pings) < rec.segmentation.min_pings_per_trip:
            log.info(
                "device %s: discarded %d-ping trip (%s), minimum is %d",
                rec.device_id, len(pings), reason, rec.segmentation.min_pings_per_trip,
            )
            return None
        trip_id = f"t{pings[0].ts}"
        if trip_id in rec.matrix.trips:
            trip_id = f"t{pings[0].ts}-{pings[-1].ts}"
        trip = Trip.from_pings(trip_id, pings, rec.matrix.grid)
        updated = rec.matrix.copy()
        updated.record(trip)
        updated.prune(trip.end_ts, rec.deviation)
        # persist first: a failed write leaves both memory and disk at the pre-trip state
        if self.data_dir is not None:
            atomic_write(self._path(rec.device_id, "pmatrix"), dumps_matrix(updated), self.config.fsync)
        rec.matrix = updated
        log.info("device %s: recorded trip %s (%s), N=%d", rec.device_id, trip_id, reason, updated.n_trips)
        return trip

    def flush(self) -> None:
        """Close every open trip (end of replay, shutdown) and persist last-known fixes."""
        for device_id in sorted(self.devices):
            rec = self.devices[device_id]
            with rec.lock:
                self._close_trip(rec, "explicit")
                self._save_lastknown(rec)

    # -- protocol ------------------------------------------------------------

    def open_session(self, push: Callable[[str], None] | None = None, name: str = "") -> Session:
        return Session(push, name)

    def close_session(self, session: Session) -> None:
        for device_id in list(session.bound):
            rec = self.devices.get(device_id)
            if rec is not None:
                with rec.lock:
                    if rec.parent_session is session:
                        rec.parent_session = None
                        rec.tracking = False

    def handle_line(self, session: Session, line: str) -> list[str]:
        """Execute one protocol line; returns the direct response lines."""
        if len(line.encode("utf-8", errors="surrogateescape")) > MAX_LINE_BYTES:
            return [ProtocolError("TOOLONG", f"line exceeds {MAX_LINE_BYTES} bytes").line()]
        parts = line.rstrip("\r\n").split(" ")
        if parts == [""]:
            return []
        command, args = parts[0], parts[1:]
        handler = self._handlers.get(command)
        if handler is None:
            return [ProtocolError("UNKNOWN", command[:32]).line()]
        try:
            return [handler(self, session, args)]
        except ProtocolError as exc:
            return [exc.line()]

    def _require(self, args: list[str], n: int, usage: str) -> None:
        if len(args) != n:
            raise ProtocolError("BADARG", f"usage: {usage}")

    def _parent_record(self, session: Session, device_id: str) -> DeviceRecord:
        rec = self.device(device_id)
        if rec.parent_id is None or session.bound.get(device_id) != rec.parent_id:
            raise ProtocolError("UNAUTH", device_id)
        return rec

    def _on_ping(self, session: Session, args: list[str]) -> str:
        self._require(args, 5, "PING <id> <lat> <lon> <ts> <batt>")
        device_id = _parse_token(args[0], "device id")
        lat = _parse_coord(args[1], "latitude", 90.0)
        lon = _parse_coord(args[2], "longitude", 180.0)
        ts = _parse_int(args[3], "timestamp")
        batt = _parse_int(args[4], "battery")
        if ts < 0 or not 0 <= batt <= 100:
            raise ProtocolError("BADARG", "timestamp or battery out of range")
        point = GeoPoint(lat, lon, ts)
        rec = self.device(device_id)
        with rec.lock:
            last = rec.open_trip[-1] if rec.open_trip else rec.last_known
            if last is not None and ts < last.ts:
                raise ProtocolError("ORDER", f"ts {ts} before {last.ts}")
            if rec.open_trip and ts - rec.open_trip[-1].ts > rec.segmentation.gap_seconds:
                self._close_trip(rec, "gap-timeout")
            rec.open_trip.append(point)
            rec.last_known = point
            rec.battery_pct = batt
            self._save_lastknown(rec)
            if rec.tracking and rec.parent_session is not None:
                rec.parent_session.push(f"POS {device_id} {_fmt_point(point)} {ts}")
            self._score_ping(rec, point)
        return "OK"

    def _score_ping(self, rec: DeviceRecord, point: GeoPoint) -> None:
        if rec.accumulator is None:
            rec.accumulator = ScoreAccumulator(rec.matrix)
        acc = rec.accumulator
        acc.update(quantize(point, rec.matrix.grid))
        if rec.latched or acc.cell_count < rec.min_prefix_cells:
            return
        score = acc.score()
        if is_deviation(rec.matrix, score, rec.deviation, now=point.ts) is Decision.ALARM:
            rec.latched = True
            self._alarm(
                rec,
                f"ALARM DEVIATION {rec.device_id} {score.normalized:.6f} {_fmt_point(point)} {point.ts}",
            )

    def _on_sos(self, session: Session, args: list[str]) -> str:
        self._require(args, 2, "SOS <id> <ts>")
        device_id = _parse_token(args[0], "device id")
        ts = _parse_int(args[1], "timestamp")
        rec = self.device(device_id)
        with rec.lock:
            self._alarm(rec, f"ALARM SOS {device_id} {_fmt_point(rec.last_known)} {ts}")
        return "OK"

    def _on_lowbat(self, session: Session, args: list[str]) -> str:
        self._require(args, 3, "LOWBAT <id> <batt> <ts>")
        device_id = _parse_token(args[0], "device id")
        batt = _parse_int(args[1], "battery")
        ts = _parse_int(args[2], "timestamp")
        rec = self.device(device_id)
        with rec.lock:
            rec.battery_pct = batt
            self._alarm(rec, f"ALARM LOWBAT {device_id} {batt} {_fmt_point(rec.last_known)} {ts}")
        return "OK"

    def _on_bind(self, session: Session, args: list[str]) -> str:
        self._require(args, 2, "BIND <id> <parent_id>")
        device_id = _parse_token(args[0], "device id")
        parent_id = _parse_token(args[1], "parent id")
        rec = self.device(device_id)
        with rec.lock:
            if rec.parent_id is not None and rec.parent_id != parent_id:
                raise ProtocolError("ALREADY_BOUND", device_id)
            if rec.parent_id is None:
                rec.parent_id = parent_id
                self._save_conf(rec)
            session.bound[device_id] = parent_id
            rec.parent_session = session
        return f"OK bound {device_id}"

    def _on_config(self, session: Session, args: list[str]) -> str:
        self._require(args, 2, "CONFIG <id> <key>=<val>")
        rec = self._parent_record(session, _parse_token(args[0], "device id"))
        key, sep, value = args[1].partition("=")
        if not sep or key not in _CONFIG_KEYS:
            raise ProtocolError("BADKEY", key)
        with rec.lock:
            self._apply_config(rec, key, value)
            self._save_conf(rec)
        return f"OK {key}={self._config_value(rec, key)}"

    def _on_track(self, session: Session, args: list[str]) -> str:
        self._require(args, 2, "TRACK <id> on|off")
        rec = self._parent_record(session, _parse_token(args[0], "device id"))
        if args[1] not in ("on", "off"):
            raise ProtocolError("BADARG", "expected on|off")
        with rec.lock:
            rec.tracking = args[1] == "on"
        return f"OK track={args[1]}"

    def _on_listen(self, session: Session, args: list[str]) -> str:
        self._require(args, 2, "LISTEN <id> on|off")
        rec = self._parent_record(session, _parse_token(args[0], "device id"))
        if args[1] not in ("on", "off"):
            raise ProtocolError("BADARG", "expected on|off")
        with rec.lock:
            rec.listening = args[1] == "on"
        return f"OK listen={args[1]}"

    def _on_status(self, session: Session, args: list[str]) -> str:
        self._require(args, 1, "STATUS <id>")
        rec = self._parent_record(session, _parse_token(args[0], "device id"))
        with rec.lock:
            last = rec.last_known
            last_text = f"{_fmt_point(last).replace(' ', ',')},{last.ts}" if last else "NOFIX"
            batt = "-" if rec.battery_pct is None else str(rec.battery_pct)
            return (
                f"OK {rec.device_id} N={rec.matrix.n_trips} armed={'yes' if rec.armed() else 'no'}"
                f" track={'on' if rec.tracking else 'off'} listen={'on' if rec.listening else 'off'}"
                f" battery={batt} last={last_text} open_pings={len(rec.open_trip)}"
                f" threshold={rec.deviation.threshold}"
            )

    def _on_closetrip(self, session: Session, args: list[str]) -> str:
        self._require(args, 1, "CLOSETRIP <id>")
        rec = self._parent_record(session, _parse_token(args[0], "device id"))
        with rec.lock:
            trip = self._close_trip(rec, "explicit")
            if trip is None:
                return f"OK none N={rec.matrix.n_trips}"
            return f"OK recorded {trip.trip_id} N={rec.matrix.n_trips}"

    _handlers: dict[str, Callable[[TrackerService, Session, list[str]], str]] = {
        "PING": _on_ping,
        "SOS": _on_sos,
        "LOWBAT": _on_lowbat,
        "BIND": _on_bind,
        "CONFIG": _on_config,
        "TRACK": _on_track,
        "LISTEN": _on_listen,
        "STATUS": _on_status,
        "CLOSETRIP": _on_closetrip,
    }


def replay(service: TrackerService, lines: Iterable[str]) -> list[str]:
    """Feed a recorded event log through one session, then close open trips.

    Returns the alarm lines raised during the replay.
    """
    start = len(service.alarm_log)
    session = service.open_session(name="replay")
    for line in lines:
        line = line.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        for response in service.handle_line(session, line):
            if response.startswith("ERR"):
                log.warning("replay: %s -> %s", line, response)
    service.flush()
    service.close_session(session)
    return service.alarm_log[start:]


class _LineHandler(socketserver.StreamRequestHandler):
    server: TrackerServer

    def handle(self) -> None:
        wlock = threading.Lock()

        def send(text: str) -> None:
            with wlock:
                try:
                    self.wfile.write((text + "\n").encode("utf-8"))
                    self.wfile.flush()
                except OSError:
                    pass

        service = self.server.service
        session = service.open_session(send, name=str(self.client_address))
        try:
            while True:
                try:
                    raw = self.rfile.readline(MAX_LINE_BYTES + 2)
                except OSError:  # peer reset counts as a disconnect
                    break
                if not raw:
                    break
                if not raw.endswith(b"\n") and len(raw) > MAX_LINE_BYTES:
                    # swallow the rest of the oversize line
                    while raw and not raw.endswith(b"\n"):
                        raw = self.rfile.readline(MAX_LINE_BYTES + 2)
                    send(ProtocolError("TOOLONG", f"line exceeds {MAX_LINE_BYTES} bytes").line())
                    continue
                line = raw.decode("utf-8", errors="replace").rstrip("\r\n")
                for response in service.handle_line(session, line):
                    send(response)
        finally:
            service.close_session(session)


class TrackerServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: TrackerService) -> None:
        self.service = service
        super().__init__(address, _LineHandler)
