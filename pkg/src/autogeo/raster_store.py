"""
Tiled store for single-band, timestamped rasters.

Every layer lives on one store-wide equirectangular grid. Each ingested
snapshot is resampled (nearest neighbour) onto that grid, cut into T x T
tiles and written as raw little-endian float32 files next to a JSON index::

    <root>/store.json
    <root>/layers/<layer>/layer.json
    <root>/layers/<layer>/<YYYYmmddTHHMMSSZ>/index.json
    <root>/layers/<layer>/<YYYYmmddTHHMMSSZ>/tile_<row>_<col>.f32

Invalid (nodata) pixels are stored as NaN. Reads go through memory maps, so
a window read only touches the pages of the tiles it intersects.
"""

from __future__ import annotations

import json
import math
import os
import re
import shutil
import tempfile
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from urllib.parse import quote

import numpy as np

from .errors import (
    MalformedHeader,
    NoTemporalMatch,
    NonFinitePixel,
    SnapshotExists,
    StoreError,
    UnknownLayer,
    UnknownSnapshot,
    WindowOutOfCoverage,
)

BAND_ROLES = ("red", "green", "blue", "nir", "other")
DEFAULT_TILE_SIZE = 256
DEFAULT_SEARCH_WINDOW = timedelta(days=30)
STORE_FORMAT_VERSION = 1
TILE_DTYPE = np.dtype("<f4")


_FRACTION = re.compile(r"\.(\d+)")


def parse_timestamp(value) -> datetime:
    """Parse an RFC 3339 string (or datetime) into an aware UTC datetime, second precision."""
    if isinstance(value, datetime):
        ts = value
    elif isinstance(value, str):
        text = value.strip()
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        # fromisoformat on 3.10 only takes 3 or 6 fraction digits
        text = _FRACTION.sub(lambda m: "." + (m.group(1) + "000000")[:6], text)
        try:
            ts = datetime.fromisoformat(text)
        except ValueError as exc:
            raise ValueError(f"not an RFC 3339 timestamp: {value!r}") from exc
    else:
        raise TypeError(f"timestamp must be str or datetime, got {type(value).__name__}")
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(ts: datetime) -> str:
    return parse_timestamp(ts).strftime("%Y-%m-%dT%H:%M:%SZ")


def _snapshot_dirname(ts: datetime) -> str:
    return ts.strftime("%Y%m%dT%H%M%SZ")


def _layer_dirname(layer_id: str) -> str:
    return quote(layer_id, safe="")


@dataclass(frozen=True)
class GridSpec:
    """Equirectangular pixel grid. Rows grow southward, columns eastward."""

    origin_lat: float
    origin_lon: float
    resolution: float

    def __post_init__(self):
        for name in ("origin_lat", "origin_lon", "resolution"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    def geo_to_pixel(self, lat, lon):
        """Return the (row, col) of the pixel containing (lat, lon).

        Works element-wise on arrays. Boundaries go to the lower index.
        """
        row = np.floor((self.origin_lat - np.asarray(lat, dtype=np.float64)) / self.resolution)
        col = np.floor((np.asarray(lon, dtype=np.float64) - self.origin_lon) / self.resolution)
        if row.ndim == 0:
            return int(row), int(col)
        return row.astype(np.int64), col.astype(np.int64)

    def pixel_to_geo(self, row, col):
        """Coordinates of the centre of pixel (row, col)."""
        lat = self.origin_lat - (np.asarray(row, dtype=np.float64) + 0.5) * self.resolution
        lon = self.origin_lon + (np.asarray(col, dtype=np.float64) + 0.5) * self.resolution
        if lat.ndim == 0:
            return float(lat), float(lon)
        return lat, lon

    def pixel_edges(self, row, col):
        """(lat_north, lon_west) of the top-left corner of pixel (row, col)."""
        return (
            self.origin_lat - row * self.resolution,
            self.origin_lon + col * self.resolution,
        )

    def to_dict(self):
        return {
            "origin_lat": self.origin_lat,
            "origin_lon": self.origin_lon,
            "resolution": self.resolution,
        }


def geo_to_pixel(grid: GridSpec, lat, lon):
    return grid.geo_to_pixel(lat, lon)


@dataclass(frozen=True)
class PixelBox:
    """Half-open pixel rectangle [row0, row1) x [col0, col1)."""

    row0: int
    col0: int
    row1: int
    col1: int

    @property
    def shape(self):
        return (self.row1 - self.row0, self.col1 - self.col0)

    def intersect(self, other: "PixelBox") -> "PixelBox | None":
        r0, c0 = max(self.row0, other.row0), max(self.col0, other.col0)
        r1, c1 = min(self.row1, other.row1), min(self.col1, other.col1)
        if r0 >= r1 or c0 >= c1:
            return None
        return PixelBox(r0, c0, r1, c1)

    def contains(self, other: "PixelBox") -> bool:
        return (
            self.row0 <= other.row0
            and self.col0 <= other.col0
            and other.row1 <= self.row1
            and other.col1 <= self.col1
        )

    def to_list(self):
        return [self.row0, self.col0, self.row1, self.col1]


@dataclass(frozen=True)
class IngestHeader:
    """Header of a BSQ-F32 v1 file pair."""

    origin_lat: float
    origin_lon: float
    resolution: float
    rows: int
    cols: int
    band_role: str = "other"
    layer_id: str | None = None
    timestamp: datetime | None = None
    nodata: str | None = "nan"
    units: str = ""

    @classmethod
    def from_dict(cls, doc) -> "IngestHeader":
        if not isinstance(doc, dict):
            raise MalformedHeader("header must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise MalformedHeader(f"unknown header fields: {sorted(extra)}")
        try:
            origin_lat = _finite(doc["origin_lat"], "origin_lat")
            origin_lon = _finite(doc["origin_lon"], "origin_lon")
            resolution = _finite(doc["resolution"], "resolution")
            rows = _count(doc["rows"], "rows")
            cols = _count(doc["cols"], "cols")
        except KeyError as exc:
            raise MalformedHeader(f"missing header field {exc.args[0]!r}") from None
        if resolution <= 0:
            raise MalformedHeader("resolution must be positive")
        band_role = doc.get("band_role", "other")
        if band_role not in BAND_ROLES:
            raise MalformedHeader(f"band_role must be one of {BAND_ROLES}, got {band_role!r}")
        nodata = doc.get("nodata", None)
        if nodata not in (None, "nan"):
            raise MalformedHeader(f"nodata must be \"nan\" or absent, got {nodata!r}")
        layer_id = doc.get("layer_id")
        if layer_id is not None and (not isinstance(layer_id, str) or not layer_id):
            raise MalformedHeader("layer_id must be a non-empty string")
        timestamp = doc.get("timestamp")
        if timestamp is not None:
            try:
                timestamp = parse_timestamp(timestamp)
            except (TypeError, ValueError) as exc:
                raise MalformedHeader(str(exc)) from None
        units = doc.get("units", "")
        if not isinstance(units, str):
            raise MalformedHeader("units must be a string")
        return cls(origin_lat, origin_lon, resolution, rows, cols, band_role,
                   layer_id, timestamp, nodata, units)

    def to_dict(self):
        doc = {
            "origin_lat": self.origin_lat,
            "origin_lon": self.origin_lon,
            "resolution": self.resolution,
            "rows": self.rows,
            "cols": self.cols,
            "band_role": self.band_role,
            "layer_id": self.layer_id,
            "timestamp": format_timestamp(self.timestamp) if self.timestamp else None,
            "nodata": self.nodata,
        }
        if self.units:
            doc["units"] = self.units
        return doc


def _finite(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise MalformedHeader(f"{name} must be a finite number")
    return float(value)


def _count(value, name):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise MalformedHeader(f"{name} must be a positive integer")
    return value


def read_bsq(header_path, data_path):
    """Load a BSQ-F32 v1 pair; returns (IngestHeader, float32 array of shape (rows, cols))."""
    try:
        doc = json.loads(Path(header_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from None
    header = IngestHeader.from_dict(doc)
    raw = Path(data_path).read_bytes()
    expected = header.rows * header.cols * 4
    if len(raw) != expected:
        raise MalformedHeader(f"data file has {len(raw)} bytes, header implies {expected}")
    pixels = np.frombuffer(raw, dtype=TILE_DTYPE).reshape(header.rows, header.cols)
    return header, pixels.astype(np.float32)


def write_bsq(header: IngestHeader, pixels, header_path, data_path):
    pixels = np.asarray(pixels, dtype=TILE_DTYPE)
    if pixels.shape != (header.rows, header.cols):
        raise ValueError(f"pixels shape {pixels.shape} != header ({header.rows}, {header.cols})")
    Path(header_path).write_text(json.dumps(header.to_dict(), indent=2) + "\n", encoding="utf-8")
    Path(data_path).write_bytes(np.ascontiguousarray(pixels).tobytes())


@dataclass(frozen=True)
class SnapshotRecord:
    layer_id: str
    timestamp: datetime
    tile_count: int
    coverage: PixelBox
    bbox: tuple  # (lat_min, lat_max, lon_min, lon_max)


@dataclass(frozen=True)
class LayerDescriptor:
    layer_id: str
    band_role: str
    units: str
    snapshots: tuple
    coverage: dict


@dataclass
class IOStats:
    """Per-layer read instrumentation."""

    tiles_read: dict = field(default_factory=lambda: defaultdict(int))
    values_read: dict = field(default_factory=lambda: defaultdict(int))
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, layer_id, tiles, values):
        with self._lock:
            self.tiles_read[layer_id] += tiles
            self.values_read[layer_id] += values

    def reset(self):
        with self._lock:
            self.tiles_read.clear()
            self.values_read.clear()


@dataclass
class _Snapshot:
    timestamp: datetime
    path: Path
    coverage: PixelBox
    tiles: frozenset


class RasterStore:
    """A directory of tiled raster layers sharing one grid.

    Opening an existing directory reads its grid from ``store.json``; a new
    directory needs ``grid``.
    """

    def __init__(self, root, grid: GridSpec | None = None, tile_size: int = DEFAULT_TILE_SIZE):
        self.root = Path(root)
        meta_path = self.root / "store.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            if meta.get("format_version") != STORE_FORMAT_VERSION:
                raise StoreError(f"unsupported store format {meta.get('format_version')!r}")
            stored = GridSpec(**meta["grid"])
            if grid is not None and grid != stored:
                raise StoreError(f"store at {self.root} uses grid {stored}, not {grid}")
            self.grid = stored
            self.tile_size = int(meta["tile_size"])
        else:
            if grid is None:
                raise StoreError(f"no store at {self.root}; pass a GridSpec to create one")
            if tile_size < 1:
                raise ValueError("tile_size must be positive")
            self.grid = grid
            self.tile_size = int(tile_size)
            (self.root / "layers").mkdir(parents=True, exist_ok=True)
            meta = {
                "format_version": STORE_FORMAT_VERSION,
                "grid": grid.to_dict(),
                "tile_size": self.tile_size,
            }
            meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        self.stats = IOStats()
        self._lock = threading.RLock()
        self._writer_locks = defaultdict(threading.Lock)
        self._layers: dict[str, dict] = {}
        self._snapshots: dict[str, dict[datetime, _Snapshot]] = {}
        self._maps: dict[tuple, np.memmap] = {}

    def __repr__(self):
        return f"RasterStore({str(self.root)!r}, grid={self.grid}, tile_size={self.tile_size})"

    # -- layers -----------------------------------------------------------

    def _layer_path(self, layer_id):
        return self.root / "layers" / _layer_dirname(layer_id)

    def layer_ids(self):
        base = self.root / "layers"
        ids = []
        for path in sorted(base.iterdir()):
            meta = path / "layer.json"
            if meta.exists():
                ids.append(json.loads(meta.read_text(encoding="utf-8"))["layer_id"])
        return ids

    def has_layer(self, layer_id) -> bool:
        return (self._layer_path(layer_id) / "layer.json").exists()

    def create_layer(self, layer_id: str, band_role: str = "other", units: str = ""):
        if not isinstance(layer_id, str) or not layer_id:
            raise ValueError("layer_id must be a non-empty string")
        if band_role not in BAND_ROLES:
            raise ValueError(f"band_role must be one of {BAND_ROLES}")
        with self._lock:
            path = self._layer_path(layer_id)
            meta_path = path / "layer.json"
            if meta_path.exists():
                return self._layer_meta(layer_id)
            path.mkdir(parents=True, exist_ok=True)
            meta = {"layer_id": layer_id, "band_role": band_role, "units": units}
            meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
            self._layers[layer_id] = meta
            return meta

    def _layer_meta(self, layer_id):
        meta = self._layers.get(layer_id)
        if meta is None:
            meta_path = self._layer_path(layer_id) / "layer.json"
            if not meta_path.exists():
                raise UnknownLayer(f"unknown layer {layer_id!r}")
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            self._layers[layer_id] = meta
        return meta

    def band_role(self, layer_id) -> str:
        return self._layer_meta(layer_id)["band_role"]

    def _snapshot_table(self, layer_id) -> dict:
        table = self._snapshots.get(layer_id)
        if table is not None:
            return table
        with self._lock:
            table = self._snapshots.get(layer_id)
            if table is not None:
                return table
            self._layer_meta(layer_id)
            table = {}
            for path in sorted(self._layer_path(layer_id).iterdir()):
                index_path = path / "index.json"
                if not path.is_dir() or not index_path.exists():
                    continue
                index = json.loads(index_path.read_text(encoding="utf-8"))
                ts = parse_timestamp(index["timestamp"])
                table[ts] = _Snapshot(
                    ts, path, PixelBox(*index["coverage"]),
                    frozenset(tuple(t) for t in index["tiles"]),
                )
            self._snapshots[layer_id] = table
            return table

    def snapshots(self, layer_id):
        """Sorted snapshot timestamps of a layer."""
        return sorted(self._snapshot_table(layer_id))

    def _snapshot(self, layer_id, timestamp) -> _Snapshot:
        ts = parse_timestamp(timestamp)
        snap = self._snapshot_table(layer_id).get(ts)
        if snap is None:
            raise UnknownSnapshot(f"layer {layer_id!r} has no snapshot at {format_timestamp(ts)}")
        return snap

    def coverage(self, layer_id, timestamp) -> PixelBox:
        return self._snapshot(layer_id, timestamp).coverage

    def layer_info(self, layer_id) -> LayerDescriptor:
        meta = self._layer_meta(layer_id)
        table = self._snapshot_table(layer_id)
        stamps = tuple(sorted(table))
        return LayerDescriptor(
            layer_id=meta["layer_id"],
            band_role=meta["band_role"],
            units=meta.get("units", ""),
            snapshots=stamps,
            coverage={ts: table[ts].coverage for ts in stamps},
        )

    # -- ingest -----------------------------------------------------------

    def ingest_files(self, header_path, data_path, *, overwrite=False) -> SnapshotRecord:
        header, pixels = read_bsq(header_path, data_path)
        return self.ingest_raster(header, pixels, overwrite=overwrite)

    def ingest_raster(self, header: IngestHeader, pixels, layer_id=None, timestamp=None,
                      *, overwrite=False) -> SnapshotRecord:
        """Resample a source raster onto the store grid and persist it as tiles."""
        if isinstance(header, dict):
            header = IngestHeader.from_dict(header)
        layer_id = layer_id or header.layer_id
        if not layer_id:
            raise MalformedHeader("no layer_id given in header or arguments")
        timestamp = timestamp if timestamp is not None else header.timestamp
        if timestamp is None:
            raise MalformedHeader("no timestamp given in header or arguments")
        ts = parse_timestamp(timestamp)

        src = _as_source_array(pixels, header)
        nan = np.isnan(src)
        if np.isinf(src).any() or (nan.any() and header.nodata != "nan"):
            raise NonFinitePixel("non-finite pixel values and no nodata sentinel declared")

        rows_src, rows_dst = _nearest_indices(
            self.grid.origin_lat - header.origin_lat, header.rows,
            header.resolution, self.grid.resolution)
        cols_src, cols_dst = _nearest_indices(
            header.origin_lon - self.grid.origin_lon, header.cols,
            header.resolution, self.grid.resolution)
        if rows_dst.size == 0 or cols_dst.size == 0:
            raise MalformedHeader("source raster does not overlap the store grid")
        resampled = src[np.ix_(rows_src, cols_src)]
        coverage = PixelBox(int(rows_dst[0]), int(cols_dst[0]),
                            int(rows_dst[-1]) + 1, int(cols_dst[-1]) + 1)

        if not self.has_layer(layer_id):
            self.create_layer(layer_id, header.band_role, header.units)

        with self._writer_locks[(layer_id, ts)]:
            final = self._layer_path(layer_id) / _snapshot_dirname(ts)
            if final.exists() and not overwrite:
                raise SnapshotExists(
                    f"layer {layer_id!r} already has a snapshot at {format_timestamp(ts)}")
            tmp = Path(tempfile.mkdtemp(prefix=".ingest-", dir=self._layer_path(layer_id)))
            try:
                tiles = self._write_tiles(tmp, resampled, coverage)
                index = {
                    "layer_id": layer_id,
                    "timestamp": format_timestamp(ts),
                    "tile_size": self.tile_size,
                    "dtype": "<f4",
                    "coverage": coverage.to_list(),
                    "tiles": [list(t) for t in tiles],
                }
                (tmp / "index.json").write_text(json.dumps(index) + "\n", encoding="utf-8")
                with self._lock:
                    self._drop_maps(layer_id, final)
                    if final.exists():
                        shutil.rmtree(final)
                    os.replace(tmp, final)
                    self._snapshots.pop(layer_id, None)
            except BaseException:
                shutil.rmtree(tmp, ignore_errors=True)
                raise

        lat_n, lon_w = self.grid.pixel_edges(coverage.row0, coverage.col0)
        lat_s, lon_e = self.grid.pixel_edges(coverage.row1, coverage.col1)
        return SnapshotRecord(layer_id, ts, len(tiles), coverage, (lat_s, lat_n, lon_w, lon_e))

    def _write_tiles(self, directory: Path, data, coverage: PixelBox):
        T = self.tile_size
        tiles = []
        for tr in range(coverage.row0 // T, (coverage.row1 - 1) // T + 1):
            for tc in range(coverage.col0 // T, (coverage.col1 - 1) // T + 1):
                box = PixelBox(tr * T, tc * T, (tr + 1) * T, (tc + 1) * T).intersect(coverage)
                tile = np.full((T, T), np.nan, dtype=TILE_DTYPE)
                tile[box.row0 - tr * T:box.row1 - tr * T, box.col0 - tc * T:box.col1 - tc * T] = data[
                    box.row0 - coverage.row0:box.row1 - coverage.row0,
                    box.col0 - coverage.col0:box.col1 - coverage.col0,
                ]
                tile.tofile(directory / f"tile_{tr}_{tc}.f32")
                tiles.append((tr, tc))
        return tiles

    def _drop_maps(self, layer_id, path):
        for key in [k for k in self._maps if k[0] == layer_id and k[1] == path]:
            del self._maps[key]

    # -- reads --------------------------------------------------------------

    def resolve_timestamp(self, layer_id, requested, search_window: timedelta | None = None) -> datetime:
        """Closest available snapshot within +/- search_window; ties go to the earlier one."""
        window = DEFAULT_SEARCH_WINDOW if search_window is None else search_window
        if window < timedelta(0):
            raise ValueError("search_window must be non-negative")
        req = parse_timestamp(requested)
        best = None
        for ts in self.snapshots(layer_id):
            delta = abs(ts - req)
            if delta <= window and (best is None or delta < best[0]):
                best = (delta, ts)
        if best is None:
            raise NoTemporalMatch(
                f"layer {layer_id!r} has no snapshot within {window} of {format_timestamp(req)}")
        return best[1]

    def _tile(self, layer_id, snap: _Snapshot, tr, tc):
        key = (layer_id, snap.path, tr, tc)
        tile = self._maps.get(key)
        if tile is None:
            with self._lock:
                tile = self._maps.get(key)
                if tile is None:
                    tile = np.memmap(snap.path / f"tile_{tr}_{tc}.f32", dtype=TILE_DTYPE,
                                     mode="r", shape=(self.tile_size, self.tile_size))
                    self._maps[key] = tile
        return tile

    def read_block(self, layer_id, timestamp, row0: int, col0: int, nrows: int, ncols: int):
        """Read an arbitrary pixel rectangle.

        Returns ``(values, valid)``: float32 values (NaN where invalid) and a
        boolean validity mask. Raises WindowOutOfCoverage if the rectangle
        misses the snapshot coverage entirely.
        """
        if nrows < 1 or ncols < 1:
            raise ValueError("block must have at least one row and column")
        snap = self._snapshot(layer_id, timestamp)
        request = PixelBox(row0, col0, row0 + nrows, col0 + ncols)
        inside = request.intersect(snap.coverage)
        if inside is None:
            raise WindowOutOfCoverage(
                f"block {request.to_list()} lies outside coverage of layer {layer_id!r}")
        out = np.full((nrows, ncols), np.nan, dtype=np.float32)
        T = self.tile_size
        touched = 0
        for tr in range(inside.row0 // T, (inside.row1 - 1) // T + 1):
            for tc in range(inside.col0 // T, (inside.col1 - 1) // T + 1):
                if (tr, tc) not in snap.tiles:
                    continue
                part = PixelBox(tr * T, tc * T, (tr + 1) * T, (tc + 1) * T).intersect(inside)
                tile = self._tile(layer_id, snap, tr, tc)
                out[part.row0 - row0:part.row1 - row0, part.col0 - col0:part.col1 - col0] = tile[
                    part.row0 - tr * T:part.row1 - tr * T,
                    part.col0 - tc * T:part.col1 - tc * T,
                ]
                touched += 1
        self.stats.record(layer_id, touched, inside.shape[0] * inside.shape[1])
        return out, ~np.isnan(out)

    def read_window(self, layer_id, timestamp, center, k: int):
        """k x k window whose top-left pixel is ``center - k // 2``."""
        if k < 1:
            raise ValueError("window size k must be >= 1")
        row, col = center
        half = k // 2
        return self.read_block(layer_id, timestamp, int(row) - half, int(col) - half, k, k)


def _as_source_array(pixels, header: IngestHeader):
    if isinstance(pixels, (bytes, bytearray, memoryview)):
        arr = np.frombuffer(pixels, dtype=TILE_DTYPE)
    else:
        arr = np.asarray(pixels)
    if arr.size != header.rows * header.cols:
        raise MalformedHeader(
            f"pixel stream has {arr.size} values, header declares {header.rows}x{header.cols}")
    return arr.reshape(header.rows, header.cols).astype(np.float32, copy=False)


def _nearest_indices(offset, n_src, res_src, res_dst):
    """Map store pixels to nearest source pixels along one axis.

    ``offset`` is the distance (degrees) from the store origin to the source
    origin along the axis direction. Returns (source_index, store_index)
    arrays for every store pixel whose centre falls inside the source.
    """
    lo = math.floor(offset / res_dst) - 2
    hi = math.ceil((offset + n_src * res_src) / res_dst) + 2
    dst = np.arange(max(lo, 0), max(hi, 0), dtype=np.int64)
    src = np.floor(((dst + 0.5) * res_dst - offset) / res_src).astype(np.int64)
    keep = (src >= 0) & (src < n_src)
    return src[keep], dst[keep]
