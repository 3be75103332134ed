"""Assemble k x k x c training patches around labeled coordinates."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import AssemblyEmpty, NoTemporalMatch, UnknownSnapshot, WindowOutOfCoverage
from .query import PointSpatial, QuerySpec
from .raster_store import RasterStore, format_timestamp, parse_timestamp

OK = "ok"
REJECTED = "rejected"


@dataclass(frozen=True)
class LabeledPoint:
    lat: float
    lon: float
    label: object = None
    label_time: datetime | None = None


@dataclass
class Patch:
    """One k x k x c sample. ``values`` is channels-last in query layer order."""

    index: int
    point: LabeledPoint
    values: np.ndarray
    valid: np.ndarray
    timestamps: tuple
    status: str = OK
    reason: str | None = None

    @property
    def ok(self):
        return self.status == OK

    def reject(self, reason) -> "Patch":
        return replace(self, status=REJECTED, reason=reason)

    def same_as(self, other: "Patch") -> bool:
        """Bit-exact comparison (NaN-aware)."""
        return (
            self.index == other.index
            and self.point == other.point
            and self.status == other.status
            and self.reason == other.reason
            and self.timestamps == other.timestamps
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.valid, other.valid)
        )


@dataclass
class PatchSet:
    patches: list
    layer_ids: tuple
    band_roles: tuple
    k: int

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def __getitem__(self, i):
        return self.patches[i]

    @property
    def c(self):
        return len(self.layer_ids)

    def subset(self, patches) -> "PatchSet":
        return PatchSet(list(patches), self.layer_ids, self.band_roles, self.k)

    def ok(self) -> "PatchSet":
        return self.subset(p for p in self.patches if p.ok)

    def rejected(self) -> "PatchSet":
        return self.subset(p for p in self.patches if not p.ok)

    def stack(self) -> np.ndarray:
        if not self.patches:
            return np.zeros((0, self.k, self.k, self.c), dtype=np.float32)
        return np.stack([p.values for p in self.patches])

    def labels(self):
        return [p.point.label for p in self.patches]

    def same_as(self, other: "PatchSet") -> bool:
        return (
            len(self) == len(other)
            and self.layer_ids == other.layer_ids
            and self.k == other.k
            and all(a.same_as(b) for a, b in zip(self.patches, other.patches))
        )


def points_from_query(spec: QuerySpec):
    if not isinstance(spec.spatial, PointSpatial):
        raise ValueError("patch assembly needs a point-list query")
    m = spec.model
    labels = m.labels if m is not None and m.labels is not None else [None] * len(spec.spatial)
    times = m.label_times if m is not None and m.label_times is not None else [None] * len(labels)
    return [LabeledPoint(lat, lon, y, t)
            for (lat, lon), y, t in zip(spec.spatial.coordinates, labels, times)]


def _extract(store: RasterStore, index, point, layer_ids, k, snapshot, window):
    when = point.label_time or snapshot
    row, col = store.grid.geo_to_pixel(point.lat, point.lon)
    c = len(layer_ids)
    values = np.full((k, k, c), np.nan, dtype=np.float32)
    valid = np.zeros((k, k), dtype=bool)
    stamps = [None] * c
    try:
        if when is None:
            raise NoTemporalMatch("no snapshot time given for point or query")
        valid[:] = True
        for i, layer in enumerate(layer_ids):
            ts = store.resolve_timestamp(layer, when, window)
            stamps[i] = ts
            block, mask = store.read_window(layer, ts, (row, col), k)
            values[:, :, i] = block
            valid &= mask
    except (NoTemporalMatch, WindowOutOfCoverage, UnknownSnapshot) as exc:
        valid[:] = False
        return Patch(index, point, values, valid, tuple(stamps), REJECTED, type(exc).__name__)
    if not valid.all():
        return Patch(index, point, values, valid, tuple(stamps), REJECTED, "PartialCoverage")
    return Patch(index, point, values, valid, tuple(stamps))


def assemble_points(store: RasterStore, points, layer_ids, k: int, snapshot=None,
                    search_window: timedelta | None = None, *, workers: int = 4,
                    allow_empty: bool = False) -> PatchSet:
    """Extract one patch per point, in input order.

    Points whose window falls outside coverage, or for which some layer has
    no snapshot in the search window, come back with status ``rejected``.
    """
    layer_ids = tuple(layer_ids)
    snapshot = None if snapshot is None else parse_timestamp(snapshot)
    band_roles = tuple(store.band_role(layer) for layer in layer_ids)
    points = list(points)

    def one(item):
        i, p = item
        return _extract(store, i, p, layer_ids, k, snapshot, search_window)

    if workers <= 1 or len(points) < 2:
        patches = [one(item) for item in enumerate(points)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            patches = list(pool.map(one, enumerate(points), chunksize=64))
    result = PatchSet(patches, layer_ids, band_roles, k)
    if not allow_empty and not any(p.ok for p in patches):
        raise AssemblyEmpty(f"all {len(patches)} points were rejected during assembly")
    return result


def assemble_patches(spec: QuerySpec, store: RasterStore, *, workers: int = 4,
                     allow_empty: bool = False) -> PatchSet:
    """Run patch assembly for a point-list query."""
    k = spec.model.window_size if spec.model else 1
    return assemble_points(store, points_from_query(spec), spec.layers, k,
                           spec.temporal.snapshot, spec.temporal.search_window,
                           workers=workers, allow_empty=allow_empty)


def export_patchset(patches: PatchSet, directory) -> Path:
    """Write one BSQ-F32 blob per patch plus ``manifest.json`` with statuses."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in patches:
        name = f"patch_{p.index:06d}.f32"
        # band-sequential: all of band 0, then band 1, ...
        np.ascontiguousarray(np.moveaxis(p.values, -1, 0), dtype="<f4").tofile(directory / name)
        entries.append({
            "index": p.index,
            "file": name,
            "lat": p.point.lat,
            "lon": p.point.lon,
            "label": p.point.label,
            "status": p.status,
            "reason": p.reason,
            "timestamps": [None if t is None else format_timestamp(t) for t in p.timestamps],
        })
    manifest = {
        "k": patches.k,
        "layers": list(patches.layer_ids),
        "band_roles": list(patches.band_roles),
        "patches": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path
