"""
Label manifest: the user's only required input.

::

    {
      "classes": ["cedar_elm", "live_oak", ...],
      "snapshot": "2018-01-29T12:00:00Z",
      "points": [{"lat": 32.9, "lon": -96.8, "label": "live_oak", "time": null}, ...]
    }

``snapshot`` and per-point ``time`` are optional.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .patches import LabeledPoint
from .query import QuerySpec, format_duration, parse_duration, with_points
from .raster_store import format_timestamp, parse_timestamp


@dataclass
class Manifest:
    classes: list
    points: list
    snapshot: object = None
    search_window: object = None

    @property
    def labels(self):
        return [p.label for p in self.points]

    def to_dict(self):
        doc = {"classes": list(self.classes)}
        if self.snapshot is not None:
            doc["snapshot"] = format_timestamp(self.snapshot)
        if self.search_window is not None:
            doc["search_window"] = format_duration(self.search_window)
        doc["points"] = [
            {"lat": p.lat, "lon": p.lon, "label": p.label,
             **({"time": format_timestamp(p.label_time)} if p.label_time else {})}
            for p in self.points
        ]
        return doc


def parse_manifest(doc) -> Manifest:
    if isinstance(doc, list):
        doc = {"points": doc}
    if not isinstance(doc, dict) or not isinstance(doc.get("points"), list):
        raise ValueError("manifest must be an object with a 'points' array")
    points = []
    for i, item in enumerate(doc["points"]):
        try:
            lat, lon, label = float(item["lat"]), float(item["lon"]), item["label"]
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"manifest point {i} needs numeric lat/lon and a label") from None
        t = item.get("time")
        points.append(LabeledPoint(lat, lon, label, None if t is None else parse_timestamp(t)))
    classes = doc.get("classes")
    if classes is None:
        classes = sorted_classes(p.label for p in points)
    unknown = {p.label for p in points} - set(classes)
    if unknown:
        raise ValueError(f"manifest labels not in class map: {sorted(map(str, unknown))}")
    snapshot = doc.get("snapshot")
    window = doc.get("search_window")
    return Manifest(list(classes), points,
                    None if snapshot is None else parse_timestamp(snapshot),
                    None if window is None else parse_duration(window))


def load_manifest(path) -> Manifest:
    return parse_manifest(json.loads(Path(path).read_text(encoding="utf-8")))


def write_manifest(manifest: Manifest, path):
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1) + "\n", encoding="utf-8")


def sorted_classes(labels):
    """Class map in sorted order (numeric for integer labels, else lexicographic)."""
    labels = set(labels)
    if all(isinstance(v, int) for v in labels):
        return sorted(labels)
    return sorted(labels, key=str)


def query_from_manifest(template: QuerySpec, manifest: Manifest) -> QuerySpec:
    """Fill a query's point list and labels from a manifest."""
    times = [p.label_time for p in manifest.points]
    spec = with_points(template, [(p.lat, p.lon) for p in manifest.points],
                       labels=manifest.labels,
                       label_times=times if any(t is not None for t in times) else None)
    temporal = spec.temporal
    if temporal.snapshot is None and manifest.snapshot is not None:
        temporal = replace(temporal, snapshot=manifest.snapshot)
    if temporal.search_window is None and manifest.search_window is not None:
        temporal = replace(temporal, search_window=manifest.search_window)
    return replace(spec, temporal=temporal)
