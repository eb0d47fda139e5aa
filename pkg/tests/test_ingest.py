import datetime as dt
import functools
import operator

import pytest
from hypothesis import given, settings, strategies as st

from routewatch.geogrid import GeoPoint, GridConfig, quantize
from routewatch.ingest import (
    SKIP,
    ChecksumError,
    CsvParseError,
    NmeaError,
    NoFix,
    OrderError,
    ParseError,
    RangeError,
    SegmentationConfig,
    encode_nmea_coord,
    format_gga,
    format_rmc,
    parse_csv_track,
    parse_nmea,
    parse_nmea_stream,
    read_track,
    segment_trips,
    write_csv_track,
)

GGA = "$GPGGA,123519,4807.038,N,01131.000,E,1,08,0.9,545.4,M,46.9,M,,*47"
RMC = "$GPRMC,123519,A,4807.038,N,01131.000,E,022.4,084.4,230394,003.1,W*6A"


def xor_fold(sentence: str) -> int:
    body = sentence[1 : sentence.index("*")]
    return functools.reduce(operator.xor, (ord(ch) for ch in body), 0)


def framed(body: str) -> str:
    return f"${body}*{functools.reduce(operator.xor, map(ord, body), 0):02X}"


def test_canonical_gga():
    assert xor_fold(GGA) == 0x47
    p = parse_nmea(GGA)
    # 48 deg 07.038 min, 11 deg 31.000 min
    assert p.lat == pytest.approx(48 + 7.038 / 60, abs=1e-12)
    assert p.lat == pytest.approx(48.1173, abs=1e-7)
    assert p.lon == pytest.approx(11.5166667, abs=1e-7)
    assert p.ts == 12 * 3600 + 35 * 60 + 19


def test_gga_uses_stream_date():
    p = parse_nmea(GGA, dt.date(2024, 5, 1))
    assert dt.datetime.fromtimestamp(p.ts, dt.timezone.utc) == dt.datetime(2024, 5, 1, 12, 35, 19, tzinfo=dt.timezone.utc)


def test_rmc_carries_date():
    assert xor_fold(RMC) == 0x6A
    p = parse_nmea(RMC)
    assert dt.datetime.fromtimestamp(p.ts, dt.timezone.utc) == dt.datetime(1994, 3, 23, 12, 35, 19, tzinfo=dt.timezone.utc)
    assert (p.lat, p.lon) == pytest.approx((48.1173, 11.5166667), abs=1e-7)


def test_bad_checksum():
    with pytest.raises(ChecksumError):
        parse_nmea(GGA[:-2] + "00")


def test_no_fix_carries_timestamp():
    line = framed("GPGGA,123519,4807.038,N,01131.000,E,0,00,,,M,,M,,")
    with pytest.raises(NoFix) as info:
        parse_nmea(line)
    assert info.value.ts == 45319
    with pytest.raises(NoFix):
        parse_nmea(framed("GPRMC,123519,V,,,,,,,230394,,,N"))


def test_southern_western_hemispheres():
    p = parse_nmea(framed("GPGGA,000000,0715.2760,S,08035.8260,W,1,08,0.9,1.0,M,0.0,M,,"))
    assert p.lat == pytest.approx(-(7 + 15.276 / 60))
    assert p.lon == pytest.approx(-(80 + 35.826 / 60))


def test_other_sentence_types_are_skipped():
    assert parse_nmea(framed("GPGSV,3,1,11,03,03,111,00,04,15,270,00,06,01,010,00,13,06,292,00")) is SKIP


@pytest.mark.parametrize(
    "body",
    [
        "GPGGA,123519,4807.038,N,01131.000,E,1,08,0.9,545.4,M,46.9,M",  # short
        "GPGGA,123519,48x7.038,N,01131.000,E,1,08,0.9,545.4,M,46.9,M,,",
        "GPGGA,123519,4807.038,Q,01131.000,E,1,08,0.9,545.4,M,46.9,M,,",
        "GPGGA,126519,4807.038,N,01131.000,E,1,08,0.9,545.4,M,46.9,M,,",
        "GPGGA,123519,4867.038,N,01131.000,E,1,08,0.9,545.4,M,46.9,M,,",
        "GPRMC,123519,A,4807.038,N,01131.000,E,022.4,084.4,320394,003.1,W",
    ],
)
def test_parse_errors(body):
    with pytest.raises(ParseError):
        parse_nmea(framed(body))


@pytest.mark.parametrize("line", ["", "GPGGA,1*00", "$GPGGA,1", "$GPGGA*4", "$GPGGA*ZZ"])
def test_framing_errors(line):
    with pytest.raises(ParseError):
        parse_nmea(line)


@settings(max_examples=2000)
@given(st.binary(max_size=120))
def test_arbitrary_bytes_never_crash(raw):
    line = raw.decode("latin-1")
    try:
        out = parse_nmea(line)
    except NmeaError:
        return
    assert out is SKIP or isinstance(out, GeoPoint)


@settings(max_examples=1000)
@given(st.text(alphabet="$GPAMRC,*0123456789.NSEW-AVg", max_size=90))
def test_frame_shaped_text_never_crashes(text):
    for line in (text, framed(text.lstrip("$").split("*")[0])):
        try:
            out = parse_nmea(line)
        except NmeaError:
            continue
        assert out is SKIP or isinstance(out, GeoPoint)


@given(st.floats(-89.9999999, 89.9999999), st.floats(-179.9999999, 179.9999999))
def test_coordinate_encoding_inverse(lat, lon):
    p = GeoPoint(lat, lon, 1_700_000_000)
    for line in (format_gga(p), format_rmc(p)):
        q = parse_nmea(line)
        assert q.lat == pytest.approx(lat, abs=1e-7)
        assert q.lon == pytest.approx(lon, abs=1e-7)
    assert parse_nmea(format_rmc(p)).ts == p.ts


def test_encode_rolls_minutes_over():
    assert encode_nmea_coord(7.99999999999, 2, "N", "S") == ("0800.0000000", "N")


def test_stream_prefers_rmc_and_tracks_date():
    base = GeoPoint(7.2546, 80.5971, 1_700_000_000)
    moved = GeoPoint(7.2550, 80.5975, 1_700_000_000)
    lines = [
        format_rmc(base),
        format_gga(moved),  # same second: RMC wins
        format_gga(GeoPoint(7.2551, 80.5976, 1_700_000_005)),  # GGA only: dated from the RMC
        framed("GPGSA,A,3,04,05,,09,12,,,24,,,,,2.5,1.3,2.1"),
        "",
    ]
    points = parse_nmea_stream(lines)
    assert [p.ts for p in points] == [1_700_000_000, 1_700_000_005]
    assert points[0].lat == pytest.approx(7.2546, abs=1e-7)


def test_stream_drops_no_fix_seconds_and_reports_line():
    good = format_gga(GeoPoint(1, 1, 10))
    nofix = framed("GPGGA,000015,,,,,0,00,,,M,,M,,")
    assert [p.ts for p in parse_nmea_stream([good, nofix])] == [10]
    with pytest.raises(ChecksumError, match="line 2"):
        parse_nmea_stream([good, GGA[:-2] + "00"])


# -- CSV ------------------------------------------------------------------------

def test_csv_two_rows():
    points = parse_csv_track("ts,lat,lon\n10,7.2546,80.5971\n15,7.2547,80.5972\n")
    assert points == [GeoPoint(7.2546, 80.5971, 10), GeoPoint(7.2547, 80.5972, 15)]


def test_csv_range_error_has_line():
    with pytest.raises(RangeError) as info:
        parse_csv_track("ts,lat,lon\n10,7.2546,80.5971\n15,91.0,80.5972\n")
    assert info.value.line == 3


def test_csv_order_error_has_line():
    with pytest.raises(OrderError) as info:
        parse_csv_track("ts,lat,lon\n10,7.2546,80.5971\n5,7.2546,80.5971\n")
    assert info.value.line == 3


@pytest.mark.parametrize(
    "text",
    [
        "lat,lon,ts\n",
        "ts,lat,lon\n10,7.2546\n",
        "ts,lat,lon\n10,7.2546,1e2\n",
        "ts,lat,lon\n-1,7.2546,80.1\n",
        "ts,lat,lon\n1,7.25460001,80.1\n",
        "ts,lat,lon\n1,nan,80.1\n",
    ],
)
def test_csv_strict_fields(text):
    with pytest.raises(CsvParseError):
        parse_csv_track(text)


coord7 = st.integers(-900_000_000, 900_000_000).map(lambda v: v / 1e7)
lon7 = st.integers(-1_800_000_000, 1_799_999_999).map(lambda v: v / 1e7)


@given(st.lists(st.tuples(st.integers(0, 10), coord7, lon7), max_size=50))
def test_csv_round_trip_property(rows):
    ts, points = 0, []
    for step, lat, lon in rows:
        ts += step
        points.append(GeoPoint(lat, lon, ts))
    text = write_csv_track(points)
    assert parse_csv_track(text) == points
    assert write_csv_track(parse_csv_track(text)) == text


def test_csv_round_trip_10k_rows():
    points = [GeoPoint(7.25 + k * 1e-7, 80.59 - k * 3e-7, 1_700_000_000 + 5 * k) for k in range(10_000)]
    points = [GeoPoint(round(p.lat, 7), round(p.lon, 7), p.ts) for p in points]
    assert parse_csv_track(write_csv_track(points)) == points


def test_read_track_sniffs_format():
    assert read_track("ts,lat,lon\n1,1,1\n") == [GeoPoint(1, 1, 1)]
    assert len(read_track(GGA + "\n", dt.date(2024, 1, 1))) == 1


# -- segmentation -----------------------------------------------------------------

def stream(start, n, step=5, lat=7.2546):
    return [GeoPoint(lat + 1e-5 * k, 80.5971, start + step * k) for k in range(n)]


def test_gap_splits_trips():
    pings = stream(0, 21) + stream(100 + 3600, 21)
    result = segment_trips(pings)
    assert len(result.trips) == 2
    assert result.discarded == []
    assert result.trips[0].trip_id == "t0"


def test_continuous_stream_is_one_trip():
    assert len(segment_trips(stream(0, 500)).trips) == 1


def test_short_runs_are_reported():
    pings = stream(0, 3) + stream(10_000, 10)
    result = segment_trips(pings)
    assert len(result.trips) == 1
    assert [len(run) for run in result.discarded] == [3]


def test_trip_cells_use_grid():
    pings = stream(0, 10)
    trip = segment_trips(pings, grid=GridConfig(3)).trips[0]
    assert trip.cells == {quantize(p, GridConfig(3)) for p in pings}


def test_segmentation_rejects_unsorted():
    with pytest.raises(OrderError):
        segment_trips([GeoPoint(0, 0, 10), GeoPoint(0, 0, 5)])


def test_segmentation_config_validation():
    with pytest.raises(ValueError):
        SegmentationConfig(gap_seconds=0)
    with pytest.raises(ValueError):
        SegmentationConfig(min_pings_per_trip=0)


@given(st.lists(st.integers(0, 2000), max_size=120), st.integers(1, 700), st.integers(1, 6))
def test_segmentation_is_a_partition(steps, gap, min_pings):
    ts, pings = 0, []
    for k, step in enumerate(steps):
        ts += step
        pings.append(GeoPoint(7.25 + k * 1e-5, 80.59, ts))
    result = segment_trips(pings, SegmentationConfig(gap, min_pings))
    kept = [p for t in result.trips for p in t.pings]
    dropped = {id(p) for run in result.discarded for p in run}
    assert kept == [p for p in pings if id(p) not in dropped]
    assert len(kept) + len(dropped) == len(pings)
    for a, b in zip(result.trips, result.trips[1:]):
        assert a.end_ts < b.start_ts
    assert all(len(t.pings) >= min_pings for t in result.trips)
