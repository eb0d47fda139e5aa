"""Fixed angular grid over WGS-84 coordinates.

A cell is the square of side 10^-d degrees whose south-west corner is
``(floor(lat * 10^d), floor(lon * 10^d)) / 10^d``. At d = 4 a cell is about
11.1 m tall; its width shrinks with cos(latitude), so "11 m x 11 m" is nominal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

EARTH_RADIUS_M = 6_371_000.0

MIN_DECIMALS = 1
MAX_DECIMALS = 7


@dataclass(frozen=True, slots=True)
class GeoPoint:
    """A timestamped position fix in decimal degrees.

    ``lon`` is normalized into [-180, 180); values already inside that range
    are stored untouched so their float bits (and hence their cell) survive.
    """

    lat: float
    lon: float
    ts: int = 0

    def __post_init__(self) -> None:
        lat = float(self.lat)
        lon = float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinate ({self.lat!r}, {self.lon!r})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon < 180.0:
            lon = (lon + 180.0) % 360.0 - 180.0
        ts = self.ts
        if isinstance(ts, float):
            if not math.isfinite(ts):
                raise ValueError(f"non-finite timestamp {ts!r}")
            ts = math.floor(ts)
        ts = int(ts)
        if ts < 0:
            raise ValueError(f"negative timestamp {ts}")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "ts", ts)


class CellId(NamedTuple):
    """Integer grid index; tuple ordering gives the lexicographic (i, j) order."""

    i: int
    j: int


@dataclass(frozen=True, slots=True)
class GridConfig:
    decimals: int = 4

    def __post_init__(self) -> None:
        if not isinstance(self.decimals, int) or not MIN_DECIMALS <= self.decimals <= MAX_DECIMALS:
            raise ValueError(f"decimals must be an integer in [{MIN_DECIMALS}, {MAX_DECIMALS}], got {self.decimals!r}")

    @property
    def scale(self) -> int:
        return 10**self.decimals


DEFAULT_GRID = GridConfig()


def floor_index(value: float, scale: int) -> int:
    """floor(value * scale), exact with respect to the decimal grid lines.

    The boundary ``k / scale`` is the double nearest to the decimal k*10^-d, so a
    coordinate written as that decimal always lands in cell k even when
    ``value * scale`` rounds to just below k.
    """
    k = math.floor(value * scale)
    if (k + 1) / scale <= value:
        k += 1
    elif k / scale > value:
        k -= 1
    return k


def quantize(p: GeoPoint, cfg: GridConfig = DEFAULT_GRID) -> CellId:
    scale = cfg.scale
    return CellId(floor_index(p.lat, scale), floor_index(p.lon, scale))


def cell_bounds(c: CellId, cfg: GridConfig = DEFAULT_GRID) -> tuple[GeoPoint, GeoPoint]:
    """Return the (south-west, north-east) corners of ``c``."""
    scale = cfg.scale
    sw = GeoPoint(c.i / scale, c.j / scale)
    # Built directly so the NE longitude of the last column is not wrapped to -180.
    ne = object.__new__(GeoPoint)
    object.__setattr__(ne, "lat", min((c.i + 1) / scale, 90.0))
    object.__setattr__(ne, "lon", (c.j + 1) / scale)
    object.__setattr__(ne, "ts", 0)
    return sw, ne


def cell_center(c: CellId, cfg: GridConfig = DEFAULT_GRID) -> GeoPoint:
    scale = cfg.scale
    return GeoPoint((c.i + 0.5) / scale, (c.j + 0.5) / scale)


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters on a sphere of radius 6,371 km."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def offset_m(p: GeoPoint, east_m: float, north_m: float) -> GeoPoint:
    """Shift ``p`` by a small displacement in its local tangent plane."""
    dlat = math.degrees(north_m / EARTH_RADIUS_M)
    dlon = math.degrees(east_m / (EARTH_RADIUS_M * math.cos(math.radians(p.lat))))
    lat = max(-90.0, min(90.0, p.lat + dlat))
    return GeoPoint(lat, p.lon + dlon, p.ts)


def format_coord(value: float, decimals: int) -> str:
    """Fixed-point text with no exponent and no '-0'."""
    text = f"{value:.{decimals}f}"
    if text.startswith("-") and float(text) == 0.0:
        text = text[1:]
    return text
