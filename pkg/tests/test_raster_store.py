import json
import math
from concurrent.futures import ThreadPoolExecutor
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from autogeo.errors import (
    MalformedHeader,
    NonFinitePixel,
    NoTemporalMatch,
    SnapshotExists,
    StoreError,
    UnknownLayer,
    UnknownSnapshot,
    WindowOutOfCoverage,
)
from autogeo.raster_store import (
    GridSpec,
    IngestHeader,
    RasterStore,
    format_timestamp,
    parse_timestamp,
    read_bsq,
    write_bsq,
)
from conftest import GRID, TS, header_for, random_raster
from oracles import closest_snapshot


# -- grid ----------------------------------------------------------------------

@given(st.integers(-10_000, 10_000), st.integers(-10_000, 10_000))
def test_pixel_centre_maps_back_to_its_pixel(row, col):
    lat, lon = GRID.pixel_to_geo(row, col)
    assert GRID.geo_to_pixel(lat, lon) == (row, col)


def test_geo_to_pixel_uses_floor_and_rows_grow_south():
    g = GridSpec(10.0, 20.0, 0.5)
    assert g.geo_to_pixel(10.0, 20.0) == (0, 0)
    assert g.geo_to_pixel(9.99, 20.01) == (0, 0)
    assert g.geo_to_pixel(9.5, 20.5) == (1, 1)  # boundary goes to the next pixel south/east
    assert g.geo_to_pixel(10.2, 19.9) == (-1, -1)
    rows, cols = g.geo_to_pixel(np.array([9.0, 8.0]), np.array([21.0, 22.0]))
    assert rows.tolist() == [2, 4] and cols.tolist() == [2, 4]


def test_grid_rejects_bad_resolution():
    with pytest.raises(ValueError):
        GridSpec(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        GridSpec(float("nan"), 0.0, 1.0)


def test_timestamps_normalise_to_utc_seconds():
    assert format_timestamp(parse_timestamp("2018-01-29T14:00:00+02:00")) == "2018-01-29T12:00:00Z"
    assert format_timestamp("2018-01-29T12:00:00.75Z") == "2018-01-29T12:00:00Z"
    with pytest.raises(ValueError):
        parse_timestamp("yesterday")


# -- ingest and read -------------------------------------------------------------

def test_aligned_ingest_round_trips_exactly(store):
    data = random_raster(40, 37)
    rec = store.ingest_raster(header_for(40, 37, row0=3, col0=5), data)
    assert rec.coverage.to_list() == [3, 5, 43, 42]
    values, valid = store.read_block("L", TS, 3, 5, 40, 37)
    assert valid.all()
    assert values.tobytes() == data.tobytes()
    # 16 x 16 tiles: rows 3..42 span tile rows 0..2, cols 5..41 span tile cols 0..2
    assert rec.tile_count == 9


def test_ingest_resamples_by_nearest_neighbour(store):
    # source pixels are 2 x 2 store pixels and offset by one store pixel
    src = np.arange(30, dtype=np.float32).reshape(5, 6)
    lat, lon = GRID.pixel_edges(1, 1)
    header = IngestHeader(lat, lon, 2 * GRID.resolution, 5, 6, "red", "R", TS)
    rec = store.ingest_raster(header, src)
    assert rec.coverage.to_list() == [1, 1, 11, 13]
    values, valid = store.read_block("R", TS, 1, 1, 10, 12)
    # oracle: the source pixel containing each store pixel centre
    expect = np.empty((10, 12), dtype=np.float32)
    for r in range(10):
        for c in range(12):
            clat, clon = GRID.pixel_to_geo(r + 1, c + 1)
            sr = math.floor((lat - clat) / (2 * GRID.resolution))
            sc = math.floor((clon - lon) / (2 * GRID.resolution))
            expect[r, c] = src[sr, sc]
    assert valid.all()
    np.testing.assert_array_equal(values, expect)


def test_nan_pixels_are_invalid(store):
    data = random_raster(8, 8)
    data[2, 3] = np.nan
    store.ingest_raster(header_for(8, 8), data)
    values, valid = store.read_block("L", TS, 0, 0, 8, 8)
    assert not valid[2, 3] and np.isnan(values[2, 3])
    assert valid.sum() == 63


def test_non_finite_pixels_need_nodata_declaration(store):
    data = random_raster(4, 4)
    data[0, 0] = np.inf
    with pytest.raises(NonFinitePixel):
        store.ingest_raster(header_for(4, 4), data)
    data[0, 0] = np.nan
    header = header_for(4, 4)
    header = IngestHeader(**{**header.__dict__, "nodata": None})
    with pytest.raises(NonFinitePixel):
        store.ingest_raster(header, data)


def test_duplicate_snapshot_needs_overwrite(store):
    store.ingest_raster(header_for(4, 4), random_raster(4, 4, 1))
    with pytest.raises(SnapshotExists):
        store.ingest_raster(header_for(4, 4), random_raster(4, 4, 2))
    new = random_raster(4, 4, 3)
    store.ingest_raster(header_for(4, 4), new, overwrite=True)
    assert store.read_block("L", TS, 0, 0, 4, 4)[0].tobytes() == new.tobytes()


def test_unknown_layer_and_snapshot(store):
    store.ingest_raster(header_for(4, 4), random_raster(4, 4))
    with pytest.raises(UnknownLayer):
        store.read_block("nope", TS, 0, 0, 1, 1)
    with pytest.raises(UnknownSnapshot):
        store.read_block("L", "2019-01-01T00:00:00Z", 0, 0, 1, 1)


def test_windows_outside_or_across_coverage(store):
    data = random_raster(20, 20)
    store.ingest_raster(header_for(20, 20), data)
    with pytest.raises(WindowOutOfCoverage):
        store.read_window("L", TS, (100, 100), 8)
    values, valid = store.read_window("L", TS, (18, 18), 8)  # rows 14..21
    assert valid[:6, :6].all() and not valid[6:, :].any() and not valid[:, 6:].any()
    np.testing.assert_array_equal(values[:6, :6], data[14:, 14:])


@given(k=st.integers(1, 12), row=st.integers(0, 39), col=st.integers(0, 39))
def test_read_window_matches_source_slice(tmp_path_factory, k, row, col):
    root = tmp_path_factory.mktemp("w")
    store = RasterStore(root, GRID, tile_size=16)
    data = random_raster(40, 40, seed=9)
    store.ingest_raster(header_for(40, 40), data)
    values, valid = store.read_window("L", TS, (row, col), k)
    r0, c0 = row - k // 2, col - k // 2
    for i in range(k):
        for j in range(k):
            inside = 0 <= r0 + i < 40 and 0 <= c0 + j < 40
            assert valid[i, j] == inside
            if inside:
                assert values[i, j] == data[r0 + i, c0 + j]


def test_store_reopens_with_its_grid(tmp_path):
    RasterStore(tmp_path, GRID, tile_size=16).ingest_raster(header_for(4, 4), random_raster(4, 4))
    again = RasterStore(tmp_path)
    assert again.grid == GRID and again.tile_size == 16
    assert again.layer_ids() == ["L"]
    with pytest.raises(StoreError):
        RasterStore(tmp_path, GridSpec(0.0, 0.0, 1.0))
    with pytest.raises(StoreError):
        RasterStore(tmp_path / "missing")


def test_layer_info_lists_snapshots_and_roles(store):
    store.ingest_raster(header_for(4, 4, role="nir", timestamp="2018-02-01T00:00:00Z"), random_raster(4, 4))
    store.ingest_raster(header_for(4, 4, role="nir", timestamp="2018-01-01T00:00:00Z"), random_raster(4, 4))
    info = store.layer_info("L")
    assert info.band_role == "nir"
    assert [format_timestamp(t) for t in info.snapshots] == ["2018-01-01T00:00:00Z",
                                                              "2018-02-01T00:00:00Z"]


# -- temporal resolution ----------------------------------------------------------

def test_resolve_timestamp_examples(store):
    for ts in ("2018-01-01T00:00:00Z", "2018-01-03T00:00:00Z"):
        store.ingest_raster(header_for(2, 2, timestamp=ts), random_raster(2, 2))
    # exactly between the two: the earlier one wins
    assert format_timestamp(store.resolve_timestamp("L", "2018-01-02T00:00:00Z")) == \
        "2018-01-01T00:00:00Z"
    assert format_timestamp(store.resolve_timestamp("L", "2018-01-02T00:00:01Z")) == \
        "2018-01-03T00:00:00Z"
    with pytest.raises(NoTemporalMatch):
        store.resolve_timestamp("L", "2018-03-01T00:00:00Z", timedelta(days=7))
    assert format_timestamp(store.resolve_timestamp("L", "2018-01-10T00:00:00Z", timedelta(days=7))) == \
        "2018-01-03T00:00:00Z"


@given(offsets=st.lists(st.integers(-100, 100), min_size=1, max_size=6, unique=True),
       request=st.integers(-120, 120), window=st.integers(0, 80))
def test_resolve_timestamp_is_exhaustive_argmin(tmp_path_factory, offsets, request, window):
    store = RasterStore(tmp_path_factory.mktemp("t"), GRID, tile_size=4)
    base = parse_timestamp(TS)
    stamps = [base + timedelta(hours=o) for o in offsets]
    for t in stamps:
        store.ingest_raster(header_for(1, 1, timestamp=t), np.zeros((1, 1), np.float32))
    req = base + timedelta(hours=request)
    expect = closest_snapshot(stamps, req, timedelta(hours=window))
    if expect is None:
        with pytest.raises(NoTemporalMatch):
            store.resolve_timestamp("L", req, timedelta(hours=window))
    else:
        assert store.resolve_timestamp("L", req, timedelta(hours=window)) == expect


# -- instrumentation --------------------------------------------------------------

def test_io_stats_count_touched_tiles(store):
    store.ingest_raster(header_for(64, 64), random_raster(64, 64))
    store.stats.reset()
    store.read_window("L", TS, (8, 8), 8)  # rows/cols 4..11, inside tile (0, 0)
    assert store.stats.tiles_read["L"] == 1
    store.stats.reset()
    store.read_window("L", TS, (16, 16), 8)  # rows/cols 12..19, four tiles
    assert store.stats.tiles_read["L"] == 4
    assert store.stats.values_read["L"] == 64


def test_concurrent_reads_agree(store):
    data = random_raster(64, 64, seed=4)
    store.ingest_raster(header_for(64, 64), data)
    centres = [(r, c) for r in range(4, 60, 5) for c in range(4, 60, 7)]

    def read(rc):
        return store.read_window("L", TS, rc, 8)[0]

    with ThreadPoolExecutor(8) as pool:
        results = list(pool.map(read, centres))
    for (r, c), got in zip(centres, results):
        np.testing.assert_array_equal(got, data[r - 4:r + 4, c - 4:c + 4])


# -- BSQ files ----------------------------------------------------------------------

def test_bsq_round_trip_and_ingest_files(tmp_path, store):
    data = random_raster(6, 7)
    header = header_for(6, 7, role="red", layer_id="red")
    write_bsq(header, data, tmp_path / "h.json", tmp_path / "d.f32")
    h2, d2 = read_bsq(tmp_path / "h.json", tmp_path / "d.f32")
    assert h2 == IngestHeader.from_dict(header.to_dict())
    assert d2.tobytes() == data.tobytes()
    store.ingest_files(tmp_path / "h.json", tmp_path / "d.f32")
    assert store.band_role("red") == "red"


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d.pop("rows"), "missing"),
    (lambda d: d.update(extra=1), "unknown"),
    (lambda d: d.update(resolution=-1.0), "positive"),
    (lambda d: d.update(band_role="swir"), "band_role"),
    (lambda d: d.update(timestamp="soon"), "RFC 3339"),
])
def test_malformed_headers(tmp_path, mutate, message):
    doc = header_for(2, 2).to_dict()
    mutate(doc)
    (tmp_path / "h.json").write_text(json.dumps(doc))
    (tmp_path / "d.f32").write_bytes(np.zeros(4, "<f4").tobytes())
    with pytest.raises(MalformedHeader, match=message):
        read_bsq(tmp_path / "h.json", tmp_path / "d.f32")


def test_data_size_must_match_header(tmp_path):
    (tmp_path / "h.json").write_text(json.dumps(header_for(2, 2).to_dict()))
    (tmp_path / "d.f32").write_bytes(np.zeros(3, "<f4").tobytes())
    with pytest.raises(MalformedHeader, match="bytes"):
        read_bsq(tmp_path / "h.json", tmp_path / "d.f32")
