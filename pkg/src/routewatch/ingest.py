"""Position input: NMEA 0183 (GGA/RMC), the ``ts,lat,lon`` CSV track, trip segmentation."""

from __future__ import annotations

import calendar
import datetime as dt
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .geogrid import DEFAULT_GRID, GeoPoint, GridConfig
from .route_model import Trip


class NmeaError(ValueError):
    pass


class ChecksumError(NmeaError):
    pass


class ParseError(NmeaError):
    pass


class NoFix(NmeaError):
    """The receiver reported no valid fix for this second."""

    def __init__(self, message: str, ts: int | None) -> None:
        super().__init__(message)
        self.ts = ts


class Skip:
    """Marker for well-formed sentences of types we do not consume."""

    _instance: Skip | None = None

    def __new__(cls) -> Skip:
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "SKIP"


SKIP = Skip()

# field counts after the address field
_GGA_FIELDS = (14,)
_RMC_FIELDS = (11, 12, 13)
_NUMBER = re.compile(r"\d+(\.\d+)?\Z")


def nmea_checksum(body: str) -> int:
    """XOR of every byte between '$' and '*'."""
    value = 0
    for b in body.encode("ascii", errors="replace"):
        value ^= b
    return value


def _split_frame(line: str) -> list[str]:
    line = line.rstrip("\r\n")
    if not line.startswith("$"):
        raise ParseError("sentence does not start with '$'")
    star = line.rfind("*")
    if star < 0 or len(line) - star != 3:
        raise ParseError("missing '*hh' checksum suffix")
    body, given = line[1:star], line[star + 1 :]
    if not all(c in "0123456789abcdefABCDEF" for c in given):
        raise ParseError(f"checksum {given!r} is not hex")
    expected = int(given, 16)
    if not body.isascii():
        raise ParseError("non-ASCII sentence body")
    if nmea_checksum(body) != expected:
        raise ChecksumError(f"checksum mismatch: computed {nmea_checksum(body):02X}, sentence says {given.upper()}")
    return body.split(",")


def _coord(value: str, hemi: str, deg_digits: int, pos: str, neg: str, limit: float) -> float:
    if not _NUMBER.match(value):
        raise ParseError(f"non-numeric coordinate {value!r}")
    whole = value.split(".")[0]
    if len(whole) != deg_digits + 2:
        raise ParseError(f"coordinate {value!r} is not in d{'d' * (deg_digits - 1)}mm.mmmm form")
    degrees = int(whole[:deg_digits])
    minutes = float(value[deg_digits:])
    if minutes >= 60.0:
        raise ParseError(f"minutes out of range in {value!r}")
    out = degrees + minutes / 60.0
    if out > limit:
        raise ParseError(f"coordinate {value!r} out of range")
    if hemi == pos:
        return out
    if hemi == neg:
        return -out
    raise ParseError(f"bad hemisphere {hemi!r}")


def _time_of_day(value: str) -> int:
    if not re.fullmatch(r"\d{6}(\.\d+)?", value):
        raise ParseError(f"bad UTC time {value!r}")
    hh, mm, ss = int(value[0:2]), int(value[2:4]), int(value[4:6])
    if hh > 23 or mm > 59 or ss > 60:
        raise ParseError(f"bad UTC time {value!r}")
    return hh * 3600 + mm * 60 + ss


def _date(value: str) -> dt.date:
    if not re.fullmatch(r"\d{6}", value):
        raise ParseError(f"bad date {value!r}")
    dd, mo, yy = int(value[0:2]), int(value[2:4]), int(value[4:6])
    # two-digit years: 80..99 -> 19xx, else 20xx
    year = 1900 + yy if yy >= 80 else 2000 + yy
    try:
        return dt.date(year, mo, dd)
    except ValueError:
        raise ParseError(f"bad date {value!r}") from None


def _epoch(day: dt.date, seconds: int) -> int:
    return calendar.timegm(day.timetuple()) + seconds


EPOCH_DATE = dt.date(1970, 1, 1)


def parse_nmea(line: str, date: dt.date | None = None) -> GeoPoint | Skip:
    """Parse one GGA or RMC sentence.

    GGA carries no date; ``date`` supplies it (1970-01-01 if omitted). Other
    well-formed sentence types return :data:`SKIP`.

    Raises:
        ChecksumError: framing is fine but the XOR checksum does not match.
        ParseError: framing, field count or field syntax is wrong.
        NoFix: the sentence reports an invalid fix; ``.ts`` is set when known.
    """
    fields = _split_frame(line)
    address, rest = fields[0], fields[1:]
    kind = address[2:] if len(address) == 5 else None
    if kind == "GGA":
        if len(rest) not in _GGA_FIELDS:
            raise ParseError(f"GGA expects {_GGA_FIELDS[0]} fields, got {len(rest)}")
        seconds = _time_of_day(rest[0])
        ts = _epoch(date or EPOCH_DATE, seconds)
        if rest[5] in ("", "0"):
            raise NoFix("GGA fix quality 0", ts)
        if not rest[5].isdigit():
            raise ParseError(f"bad fix quality {rest[5]!r}")
        lat = _coord(rest[1], rest[2], 2, "N", "S", 90.0)
        lon = _coord(rest[3], rest[4], 3, "E", "W", 180.0)
        return GeoPoint(lat, lon, ts)
    if kind == "RMC":
        if len(rest) not in _RMC_FIELDS:
            raise ParseError(f"RMC expects 11-13 fields, got {len(rest)}")
        seconds = _time_of_day(rest[0])
        day = _date(rest[8]) if rest[8] else (date or EPOCH_DATE)
        ts = _epoch(day, seconds)
        if rest[1] == "V":
            raise NoFix("RMC status V", ts)
        if rest[1] != "A":
            raise ParseError(f"bad RMC status {rest[1]!r}")
        lat = _coord(rest[2], rest[3], 2, "N", "S", 90.0)
        lon = _coord(rest[4], rest[5], 3, "E", "W", 180.0)
        return GeoPoint(lat, lon, ts)
    if not address or not address.isalnum():
        raise ParseError(f"bad address field {address!r}")
    return SKIP


def parse_nmea_stream(lines: Iterable[str], date: dt.date | None = None) -> list[GeoPoint]:
    """Collapse a receiver log into one point per second.

    Within a second RMC wins over GGA (RMC carries the date); a GGA no-fix in
    that second drops it. The stream date follows the latest RMC. Unparseable
    lines raise with their 1-based line number in the message.
    """
    out: dict[int, tuple[GeoPoint, bool]] = {}
    dropped: set[int] = set()
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        try:
            point = parse_nmea(line, date)
        except NoFix as exc:
            if exc.ts is not None:
                dropped.add(exc.ts)
            continue
        except NmeaError as exc:
            raise type(exc)(f"line {lineno}: {exc}") from exc
        if point is SKIP:
            continue
        is_rmc = line[3:6] == "RMC"
        if is_rmc:
            date = dt.datetime.fromtimestamp(point.ts, dt.timezone.utc).date()
        prev = out.get(point.ts)
        if prev is None or (is_rmc and not prev[1]):
            out[point.ts] = (point, is_rmc)
    return [out[ts][0] for ts in sorted(out) if ts not in dropped]


def encode_nmea_coord(value: float, deg_digits: int, pos: str, neg: str) -> tuple[str, str]:
    """Inverse of the ddmm.mmmm conversion, with 7 fractional minute digits."""
    hemi = pos if value >= 0 else neg
    value = abs(value)
    degrees = int(value)
    minutes = round((value - degrees) * 60.0, 7)
    if minutes >= 60.0:
        degrees += 1
        minutes -= 60.0
    return f"{degrees:0{deg_digits}d}{minutes:010.7f}", hemi


def format_gga(p: GeoPoint) -> str:
    t = dt.datetime.fromtimestamp(p.ts, dt.timezone.utc)
    lat, ns = encode_nmea_coord(p.lat, 2, "N", "S")
    lon, ew = encode_nmea_coord(p.lon, 3, "E", "W")
    body = f"GPGGA,{t:%H%M%S},{lat},{ns},{lon},{ew},1,08,0.9,0.0,M,0.0,M,,"
    return f"${body}*{nmea_checksum(body):02X}"


def format_rmc(p: GeoPoint) -> str:
    t = dt.datetime.fromtimestamp(p.ts, dt.timezone.utc)
    lat, ns = encode_nmea_coord(p.lat, 2, "N", "S")
    lon, ew = encode_nmea_coord(p.lon, 3, "E", "W")
    body = f"GPRMC,{t:%H%M%S},A,{lat},{ns},{lon},{ew},0.0,0.0,{t:%d%m%y},,,A"
    return f"${body}*{nmea_checksum(body):02X}"


# -- CSV tracks ----------------------------------------------------------------

CSV_HEADER = "ts,lat,lon"
_CSV_COORD = re.compile(r"-?\d+(\.\d{1,7})?\Z")


class TrackError(ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class CsvParseError(TrackError):
    pass


class OrderError(TrackError):
    pass


class RangeError(TrackError):
    pass


def parse_csv_track(text: str) -> list[GeoPoint]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].rstrip("\r") != CSV_HEADER:
        raise CsvParseError(f"expected header {CSV_HEADER!r}", 1)
    points: list[GeoPoint] = []
    last_ts = -1
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.rstrip("\r").split(",")
        if len(parts) != 3:
            raise CsvParseError(f"expected 3 fields, got {len(parts)}", lineno)
        ts_text, lat_text, lon_text = parts
        if not ts_text.isdigit():
            raise CsvParseError(f"bad timestamp {ts_text!r}", lineno)
        for text_value in (lat_text, lon_text):
            if not _CSV_COORD.match(text_value):
                raise CsvParseError(f"bad coordinate {text_value!r}", lineno)
        ts, lat, lon = int(ts_text), float(lat_text), float(lon_text)
        if not -90.0 <= lat <= 90.0:
            raise RangeError(f"latitude {lat_text} out of range", lineno)
        if not -180.0 <= lon <= 180.0:
            raise RangeError(f"longitude {lon_text} out of range", lineno)
        if ts < last_ts:
            raise OrderError(f"timestamp {ts} earlier than previous {last_ts}", lineno)
        last_ts = ts
        points.append(GeoPoint(lat, lon, ts))
    return points


def _csv_coord(value: float) -> str:
    text = f"{value:.7f}".rstrip("0").rstrip(".")
    return "0" if text in ("-0", "") else text


def write_csv_track(points: Iterable[GeoPoint]) -> str:
    rows = [CSV_HEADER]
    rows.extend(f"{p.ts},{_csv_coord(p.lat)},{_csv_coord(p.lon)}" for p in points)
    return "\n".join(rows) + "\n"


def read_track(text: str, date: dt.date | None = None) -> list[GeoPoint]:
    """Parse a track file, sniffing NMEA ('$' first) versus CSV."""
    first = next((ln.strip() for ln in text.splitlines() if ln.strip()), "")
    if first.startswith("$"):
        return parse_nmea_stream(text.splitlines(), date)
    return parse_csv_track(text)


# -- trip segmentation ---------------------------------------------------------

@dataclass(frozen=True)
class SegmentationConfig:
    gap_seconds: int = 600
    min_pings_per_trip: int = 5

    def __post_init__(self) -> None:
        if self.gap_seconds <= 0:
            raise ValueError("gap_seconds must be positive")
        if self.min_pings_per_trip < 1:
            raise ValueError("min_pings_per_trip must be >= 1")


@dataclass
class Segmentation:
    trips: list[Trip] = field(default_factory=list)
    discarded: list[list[GeoPoint]] = field(default_factory=list)


def split_on_gaps(pings: Sequence[GeoPoint], gap_seconds: int) -> list[list[GeoPoint]]:
    runs: list[list[GeoPoint]] = []
    for p in pings:
        if runs and p.ts - runs[-1][-1].ts <= gap_seconds:
            runs[-1].append(p)
        else:
            runs.append([p])
    return runs


def segment_trips(
    pings: Sequence[GeoPoint],
    cfg: SegmentationConfig = SegmentationConfig(),
    grid: GridConfig = DEFAULT_GRID,
    id_prefix: str = "t",
) -> Segmentation:
    """Split a time-ordered ping stream into trips at silences longer than ``gap_seconds``.

    Runs shorter than ``min_pings_per_trip`` go to ``discarded``. Trip ids are
    ``<id_prefix><start_ts>``.
    """
    for prev, cur in zip(pings, pings[1:]):
        if cur.ts < prev.ts:
            raise OrderError(f"timestamps decrease at ts={cur.ts}")
    result = Segmentation()
    for run in split_on_gaps(pings, cfg.gap_seconds):
        if len(run) < cfg.min_pings_per_trip:
            result.discarded.append(run)
        else:
            result.trips.append(Trip.from_pings(f"{id_prefix}{run[0].ts}", run, grid))
    return result
