import math
from decimal import Decimal, ROUND_FLOOR

import pytest
from hypothesis import given, settings, strategies as st

from routewatch.geogrid import (
    CellId,
    GeoPoint,
    GridConfig,
    cell_bounds,
    cell_center,
    format_coord,
    haversine_m,
    offset_m,
    quantize,
)

R = 6_371_000.0

# the 4 x 3 table of tags, 11 m apart
TAG_TABLE = [(lat, lon) for lon in (80.5970, 80.5971, 80.5972, 80.5973) for lat in (7.2545, 7.2546, 7.2547)]


def decimal_floor_oracle(x: float, d: int) -> int:
    return int((Decimal(repr(x)) * (Decimal(10) ** d)).to_integral_value(rounding=ROUND_FLOOR))


def test_quantize_figure_example():
    assert quantize(GeoPoint(7.25463, 80.59712)) == CellId(72546, 805971)


def test_quantize_origin():
    assert quantize(GeoPoint(0.0, 0.0)) == CellId(0, 0)


def test_quantize_negative_latitude():
    assert decimal_floor_oracle(-7.25463, 4) == -72547
    assert quantize(GeoPoint(-7.25463, 80.59712)) == CellId(-72547, 805971)


def test_tag_table_cells_are_distinct_and_stable():
    cells = [quantize(GeoPoint(lat, lon)) for lat, lon in TAG_TABLE]
    assert len(set(cells)) == 12
    for (lat, lon), cell in zip(TAG_TABLE, cells):
        assert cell == CellId(round(lat * 1e4), round(lon * 1e4))
        assert quantize(GeoPoint(lat + 0.00005, lon + 0.00005)) == cell


def test_tag_values_that_round_below_their_grid_line():
    # 0.0003 * 1e4 == 2.9999999999999996 and 80.597 * 10 == 805.9699999999999
    assert 0.0003 * 1e4 < 3
    assert quantize(GeoPoint(0.0003, 0.0003)) == CellId(3, 3)
    assert 80.597 * 10 < 805.97
    assert quantize(GeoPoint(7.2546, 80.597), GridConfig(3)).j == 80597
    assert quantize(GeoPoint(80.597, 80.597), GridConfig(1)) == CellId(805, 805)


@settings(max_examples=500)
@given(st.floats(-90, 90, allow_nan=False), st.floats(-180, 179.99999, allow_nan=False), st.integers(1, 7))
def test_quantize_matches_decimal_oracle(lat, lon, d):
    cell = quantize(GeoPoint(lat, lon), GridConfig(d))
    assert cell == (decimal_floor_oracle(lat, d), decimal_floor_oracle(lon, d))


def test_cell_bounds_examples():
    sw, ne = cell_bounds(CellId(72546, 805971))
    assert (sw.lat, sw.lon) == (7.2546, 80.5971)
    assert (ne.lat, ne.lon) == (7.2547, 80.5972)
    sw, ne = cell_bounds(CellId(0, 0))
    assert (sw.lat, sw.lon, ne.lat, ne.lon) == (0.0, 0.0, 0.0001, 0.0001)


cells = st.builds(CellId, st.integers(-899_999, 899_998), st.integers(-1_800_000, 1_799_998))


@settings(max_examples=1000)
@given(cells)
def test_midpoint_round_trip(c):
    sw, ne = cell_bounds(c)
    mid = GeoPoint((sw.lat + ne.lat) / 2, (sw.lon + ne.lon) / 2)
    assert quantize(mid) == c
    assert quantize(cell_center(c)) == c


@settings(max_examples=300)
@given(cells, st.floats(0.001, 0.999), st.floats(0.001, 0.999))
def test_points_inside_bounds_map_back(c, u, v):
    sw, ne = cell_bounds(c)
    p = GeoPoint(sw.lat + u * (ne.lat - sw.lat), sw.lon + v * (ne.lon - sw.lon))
    assert quantize(p) == c


@given(st.floats(-90, 90), st.floats(-90, 90), st.floats(-180, 179.9))
def test_quantize_monotone(a, b, lon):
    lo, hi = sorted((a, b))
    assert quantize(GeoPoint(lo, lon)).i <= quantize(GeoPoint(hi, lon)).i
    assert quantize(GeoPoint(lon / 2, lo)).j <= quantize(GeoPoint(lon / 2, hi)).j


def law_of_cosines_m(a, b):
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dl = math.radians(b.lon - a.lon)
    c = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
    return R * math.acos(max(-1.0, min(1.0, c)))


def test_haversine_latitude_step():
    a, b = GeoPoint(7.2546, 80.5971), GeoPoint(7.2547, 80.5971)
    d = haversine_m(a, b)
    assert d == pytest.approx(law_of_cosines_m(a, b), abs=1e-3)
    assert d == pytest.approx(0.0001 * math.pi / 180 * R, rel=1e-9)
    assert abs(d - 11.13) < 0.02


def test_haversine_equator_step():
    d = haversine_m(GeoPoint(0, 0), GeoPoint(0, 0.0001))
    assert d == pytest.approx(0.0001 * math.pi / 180 * R, rel=1e-12)


def test_haversine_identity_and_symmetry():
    a, b = GeoPoint(7.2546, 80.5971), GeoPoint(7.30, 80.62)
    assert haversine_m(a, a) == 0.0
    assert haversine_m(a, b) == haversine_m(b, a)
    assert haversine_m(a, b) == pytest.approx(law_of_cosines_m(a, b), rel=1e-6)


box = st.tuples(st.floats(0, 1000), st.floats(0, 1000))


@given(box, box, box)
def test_haversine_triangle_inequality(p, q, r):
    origin = GeoPoint(7.25, 80.59)
    a, b, c = (offset_m(origin, e, n) for e, n in (p, q, r))
    assert haversine_m(a, c) <= haversine_m(a, b) + haversine_m(b, c) + 1e-6


def test_longitude_cell_width_is_nominal():
    # cells are fixed in angle: narrower east-west than north-south away from the equator
    sw, ne = cell_bounds(CellId(72546, 805971))
    width = haversine_m(sw, GeoPoint(sw.lat, ne.lon))
    height = haversine_m(sw, GeoPoint(ne.lat, sw.lon))
    assert 11.0 < width < height < 11.2


def test_geopoint_validation():
    with pytest.raises(ValueError):
        GeoPoint(90.5, 0)
    with pytest.raises(ValueError):
        GeoPoint(float("nan"), 0)
    with pytest.raises(ValueError):
        GeoPoint(0, 0, -1)
    assert GeoPoint(0, 180.0).lon == -180.0
    assert GeoPoint(0, 190.0).lon == pytest.approx(-170.0)
    assert GeoPoint(0, 80.5971).lon == 80.5971
    assert GeoPoint(0, 0, 12.7).ts == 12


@pytest.mark.parametrize("d", [0, 8, -1])
def test_grid_config_bounds(d):
    with pytest.raises(ValueError):
        GridConfig(d)


def test_format_coord():
    assert format_coord(7.2546, 4) == "7.2546"
    assert format_coord(-0.00001, 4) == "0.0000"
    assert format_coord(-1e-20, 7) == "0.0000000"
    assert "e" not in format_coord(1e-8, 7)
