"""Grid probability matrix: learning habitual routes and scoring new ones.

Each cell keeps ``c``, the number of retained trips that visited it at least
once. The displayed "figure value" of a cell is ``c + 1`` (1 for never
visited), and the per-cell probability is the add-one estimate
``(c + 1) / (N + 1)`` over ``N`` retained trips. A route's likelihood is the
product of its cell probabilities, accumulated in the log domain; alarms are
decided on the geometric mean so the threshold does not depend on route length.
"""

from __future__ import annotations

import datetime as dt
import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .geogrid import DEFAULT_GRID, CellId, GeoPoint, GridConfig, quantize

SECONDS_PER_DAY = 86_400
FORMAT_VERSION = "v1"


class DuplicateTripError(ValueError):
    pass


class MatrixFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Trip:
    """One journey. ``pings`` may be empty for trips reloaded from disk."""

    trip_id: str
    cells: frozenset[CellId]
    start_ts: int
    end_ts: int
    pings: tuple[GeoPoint, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.trip_id or any(ch.isspace() for ch in self.trip_id):
            raise ValueError(f"trip id must be a non-empty token, got {self.trip_id!r}")
        if not self.cells:
            raise ValueError("trip visits no cells")
        if self.end_ts < self.start_ts:
            raise ValueError(f"trip {self.trip_id} ends before it starts")

    @classmethod
    def from_pings(cls, trip_id: str, pings: Sequence[GeoPoint], grid: GridConfig = DEFAULT_GRID) -> Trip:
        if not pings:
            raise ValueError("trip needs at least one ping")
        for prev, cur in zip(pings, pings[1:]):
            if cur.ts < prev.ts:
                raise ValueError(f"trip {trip_id}: timestamps decrease at ts={cur.ts}")
        cells = frozenset(quantize(p, grid) for p in pings)
        return cls(trip_id, cells, pings[0].ts, pings[-1].ts, tuple(pings))


@dataclass(frozen=True)
class DeviationConfig:
    threshold: float = 0.4
    min_trips: int = 3
    min_days: int = 3
    retention_days: int = 120

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.min_trips < 1:
            raise ValueError("min_trips must be >= 1")
        if self.min_days < 0:
            raise ValueError("min_days must be >= 0")
        if self.retention_days < self.min_days:
            raise ValueError("retention_days must be >= min_days")


@dataclass(frozen=True)
class RouteScore:
    raw_product: float
    log_likelihood: float
    cell_count: int
    normalized: float


class Decision(enum.Enum):
    ALARM = "ALARM"
    NORMAL = "NORMAL"
    UNARMED = "UNARMED"


class ProbabilityMatrix:
    """Sparse per-cell trip counts plus the retained trips they came from.

    Single writer: ``record``/``prune`` mutate in place. Scoring only reads.
    Equality compares grid, counts and retained trips, not ``created_at``.
    """

    def __init__(self, grid: GridConfig = DEFAULT_GRID, created_at: int = 0) -> None:
        self.grid = grid
        self.created_at = created_at
        self.counts: dict[CellId, int] = {}
        self.trips: dict[str, Trip] = {}

    @property
    def n_trips(self) -> int:
        return len(self.trips)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProbabilityMatrix):
            return NotImplemented
        return self.grid == other.grid and self.counts == other.counts and self.trips == other.trips

    def __repr__(self) -> str:
        return f"ProbabilityMatrix(d={self.grid.decimals}, N={self.n_trips}, cells={len(self.counts)})"

    def copy(self) -> ProbabilityMatrix:
        m = ProbabilityMatrix(self.grid, self.created_at)
        m.counts = dict(self.counts)
        m.trips = dict(self.trips)
        return m

    def count(self, c: CellId) -> int:
        return self.counts.get(c, 0)

    def figure_value(self, c: CellId) -> int:
        return self.counts.get(c, 0) + 1

    def first_trip_ts(self) -> int | None:
        if not self.trips:
            return None
        return min(t.start_ts for t in self.trips.values())

    def last_trip_ts(self) -> int | None:
        if not self.trips:
            return None
        return max(t.end_ts for t in self.trips.values())

    def record(self, trip: Trip) -> None:
        if trip.trip_id in self.trips:
            raise DuplicateTripError(f"trip {trip.trip_id!r} already recorded")
        self.trips[trip.trip_id] = trip
        counts = self.counts
        for c in trip.cells:
            counts[c] = counts.get(c, 0) + 1

    def prune(self, now: int, cfg: DeviationConfig) -> list[Trip]:
        """Drop trips that ended before the retention window; return them."""
        cutoff = now - cfg.retention_days * SECONDS_PER_DAY
        expired = [t for t in self.trips.values() if t.end_ts < cutoff]
        counts = self.counts
        for t in expired:
            del self.trips[t.trip_id]
            for c in t.cells:
                left = counts[c] - 1
                if left:
                    counts[c] = left
                else:
                    del counts[c]
        return expired


def build_matrix(trips: Iterable[Trip], grid: GridConfig = DEFAULT_GRID) -> ProbabilityMatrix:
    m = ProbabilityMatrix(grid)
    for t in trips:
        m.record(t)
    return m


def record_trip(m: ProbabilityMatrix, t: Trip) -> ProbabilityMatrix:
    m.record(t)
    return m


def prune_retention(m: ProbabilityMatrix, now: int, cfg: DeviationConfig) -> ProbabilityMatrix:
    m.prune(now, cfg)
    return m


def cell_probability(m: ProbabilityMatrix, c: CellId) -> float:
    return (m.counts.get(c, 0) + 1) / (m.n_trips + 1)


class ScoreAccumulator:
    """Running route score for a live cell stream.

    Consecutive repeats of a cell are ignored. The matrix must not change while
    an accumulator is in use (the service only records trips on trip close).
    """

    __slots__ = ("_counts", "_log_denominator", "_last", "log_likelihood", "cell_count")

    def __init__(self, m: ProbabilityMatrix) -> None:
        self._counts = m.counts
        self._log_denominator = math.log(m.n_trips + 1)
        self._last: CellId | None = None
        self.log_likelihood = 0.0
        self.cell_count = 0

    def update(self, cell: CellId) -> None:
        if cell == self._last:
            return
        self._last = cell
        self.log_likelihood += math.log(self._counts.get(cell, 0) + 1) - self._log_denominator
        self.cell_count += 1

    @property
    def empty(self) -> bool:
        return self.cell_count == 0

    def score(self) -> RouteScore | None:
        """Current score, or None before any cell has been seen."""
        if self.cell_count == 0:
            return None
        ll = self.log_likelihood
        return RouteScore(
            raw_product=math.exp(ll),
            log_likelihood=ll,
            cell_count=self.cell_count,
            normalized=math.exp(ll / self.cell_count),
        )


def incremental_score(acc: ScoreAccumulator, next_cell: CellId) -> ScoreAccumulator:
    acc.update(next_cell)
    return acc


def score_route(m: ProbabilityMatrix, cells: Iterable[CellId]) -> RouteScore:
    acc = ScoreAccumulator(m)
    for c in cells:
        acc.update(c)
    score = acc.score()
    if score is None:
        raise ValueError("cannot score an empty route")
    return score


def calendar_days_between(start_ts: int, end_ts: int) -> int:
    start = dt.datetime.fromtimestamp(start_ts, dt.timezone.utc).date()
    end = dt.datetime.fromtimestamp(end_ts, dt.timezone.utc).date()
    return (end - start).days


def is_armed(m: ProbabilityMatrix, cfg: DeviationConfig, now: int | None = None) -> bool:
    """Learning is over once enough trips AND enough UTC calendar days have passed.

    ``now`` defaults to the end of the most recent retained trip.
    """
    if m.n_trips < cfg.min_trips:
        return False
    first = m.first_trip_ts()
    if now is None:
        now = m.last_trip_ts()
    return calendar_days_between(first, now) >= cfg.min_days


def is_deviation(
    m: ProbabilityMatrix,
    score: RouteScore | None,
    cfg: DeviationConfig,
    now: int | None = None,
) -> Decision:
    if score is None or not is_armed(m, cfg, now):
        return Decision.UNARMED
    return Decision.ALARM if score.normalized < cfg.threshold else Decision.NORMAL


# -- persistence -------------------------------------------------------------

def dumps_matrix(m: ProbabilityMatrix) -> str:
    lines = [f"PMATRIX {FORMAT_VERSION} d={m.grid.decimals} N={m.n_trips}"]
    for t in sorted(m.trips.values(), key=lambda t: (t.start_ts, t.trip_id)):
        lines.append(f"TRIP {t.trip_id} {t.start_ts} {t.end_ts} {len(t.cells)}")
        lines.extend(f"{c.i} {c.j}" for c in sorted(t.cells))
    return "\n".join(lines) + "\n"


def loads_matrix(text: str) -> ProbabilityMatrix:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MatrixFormatError("empty matrix file")
    header = lines[0].split(" ")
    if len(header) < 2 or header[0] != "PMATRIX":
        raise MatrixFormatError("not a PMATRIX file")
    if header[1] != FORMAT_VERSION:
        raise MatrixFormatError(f"unsupported matrix version {header[1]!r} (expected {FORMAT_VERSION})")
    try:
        fields = dict(part.split("=", 1) for part in header[2:])
        grid = GridConfig(int(fields["d"]))
        n_declared = int(fields["N"])
    except (KeyError, ValueError) as exc:
        raise MatrixFormatError(f"bad header line: {lines[0]!r}") from exc

    m = ProbabilityMatrix(grid)
    pos = 1
    while pos < len(lines):
        parts = lines[pos].split(" ")
        if len(parts) != 5 or parts[0] != "TRIP":
            raise MatrixFormatError(f"line {pos + 1}: expected TRIP record")
        try:
            start, end, n_cells = int(parts[2]), int(parts[3]), int(parts[4])
            body = lines[pos + 1 : pos + 1 + n_cells]
            if len(body) != n_cells:
                raise MatrixFormatError(f"line {pos + 1}: truncated trip")
            cells = []
            for row in body:
                i, j = row.split(" ")
                cells.append(CellId(int(i), int(j)))
            trip = Trip(parts[1], frozenset(cells), start, end)
            m.record(trip)
        except (ValueError, DuplicateTripError) as exc:
            if isinstance(exc, MatrixFormatError):
                raise
            raise MatrixFormatError(f"line {pos + 1}: {exc}") from exc
        pos += 1 + n_cells
    if m.n_trips != n_declared:
        raise MatrixFormatError(f"header declares N={n_declared} but file holds {m.n_trips} trips")
    return m


def cell_histogram(m: ProbabilityMatrix) -> Counter[int]:
    """How many cells carry each figure value (never-visited cells excluded)."""
    return Counter(c + 1 for c in m.counts.values())
