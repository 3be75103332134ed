"""
Query documents: the JSON the user submits for data, training and inference.

A document has ``layers``, ``spatial``, ``temporal`` and, for train/test
requests, a ``model`` block::

    {
      "layers": [{"type": "raster", "id": "red"}, ...],
      "spatial": {"type": "point", "coordinates": [[lat, lon], ...]},
      "temporal": {"intervals": [{"snapshot": "2018-01-29T12:00:00Z"}],
                   "search_window": "7d"},
      "model": {"mode": "train", "id": "trees", "architecture": "random_forest",
                "label": [...], "window_size": 32,
                "filters": {"ndvi": {"min": 0.0}},
                "params": {"features": {"mean": [0, 1, "ndvi"], ...}}}
    }

Point coordinates may also be given flat (``[lat1, lon1, lat2, lon2]``) or as
a ``"lat, lon; lat, lon"`` string; :func:`serialize_query` always writes the
array-of-pairs form.
"""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta

from .errors import QuerySyntaxError, QueryTypeError, UnknownArchitecture, UnknownField
from .raster_store import BAND_ROLES, format_timestamp, parse_timestamp

ARCHITECTURES = ("random_forest", "resnet", "flexcnn")
MODES = ("train", "test")
STATISTICS = ("min", "max", "mean", "std")
DERIVED_INDICES = ("ndvi",)

_COMMON_PARAMS = {"features", "seed", "split", "band_roles"}
PARAM_KEYS = {
    "random_forest": _COMMON_PARAMS | {
        "grid", "n_estimators", "max_depth", "features_per_split", "bootstrap"},
    "resnet": _COMMON_PARAMS | {
        "preset", "profile", "epochs", "batch_size", "lr", "lr_step", "momentum",
        "weight_decay", "loss", "augment", "widths"},
}
PARAM_KEYS["flexcnn"] = PARAM_KEYS["resnet"]


# -- filters and features --------------------------------------------------

@dataclass(frozen=True)
class Bound:
    """Bounds on one statistic of one band or derived index."""

    selector: str | int
    statistic: str = "mean"
    min: float | None = None
    max: float | None = None

    @property
    def name(self) -> str:
        return f"{self.selector}.{self.statistic}"


@dataclass(frozen=True)
class FilterSpec:
    """Per-sample quality bounds.

    A bare key such as ``"ndvi"`` bounds the patch mean; ``"ndvi.std"`` or
    ``"2.max"`` names the statistic explicitly. Keys may be band indices,
    band roles (``"red"``, ``"nir"``...) or derived indices.
    """

    bounds: tuple = ()

    @classmethod
    def from_dict(cls, doc) -> "FilterSpec":
        if doc is None:
            return cls()
        if not isinstance(doc, dict):
            raise QueryTypeError("filters must be an object")
        bounds = []
        for key, value in doc.items():
            selector, _, statistic = key.partition(".")
            statistic = statistic or "mean"
            if statistic not in STATISTICS:
                raise QueryTypeError(f"filter {key!r}: unknown statistic {statistic!r}")
            if not selector:
                raise QueryTypeError(f"filter {key!r}: empty selector")
            if not isinstance(value, dict):
                raise QueryTypeError(f"filter {key!r} must map to an object of bounds")
            unknown = set(value) - {"min", "max"}
            if unknown:
                raise UnknownField(f"filter {key!r}: unknown bounds {sorted(unknown)}")
            lo, hi = value.get("min"), value.get("max")
            for v in (lo, hi):
                if v is not None and not _is_number(v):
                    raise QueryTypeError(f"filter {key!r}: bounds must be numbers")
            sel = int(selector) if selector.isascii() and selector.isdigit() else selector
            bounds.append(Bound(sel, statistic,
                                None if lo is None else float(lo),
                                None if hi is None else float(hi)))
        return cls(tuple(bounds))

    def to_dict(self):
        doc = {}
        for b in self.bounds:
            key = str(b.selector) if b.statistic == "mean" else f"{b.selector}.{b.statistic}"
            entry = {}
            if b.min is not None:
                entry["min"] = b.min
            if b.max is not None:
                entry["max"] = b.max
            doc[key] = entry
        return doc

    def __bool__(self):
        return bool(self.bounds)

    def violations(self):
        out = []
        for b in self.bounds:
            for v in (b.min, b.max):
                if v is not None and not math.isfinite(v):
                    out.append(f"filter {b.name}: bound {v} is not finite")
            if b.min is not None and b.max is not None and b.min > b.max:
                out.append(f"filter {b.name}: min {b.min} > max {b.max}")
            if isinstance(b.selector, str) and b.selector not in DERIVED_INDICES + BAND_ROLES:
                out.append(f"filter {b.name}: unknown selector {b.selector!r}")
        return out


@dataclass(frozen=True)
class FeatureSpec:
    """Hand-crafted feature request for the random forest."""

    mean: tuple = ()
    std: tuple = ()
    glcm_contrast: tuple = ()
    glcm_levels: int = 8

    @classmethod
    def from_dict(cls, doc) -> "FeatureSpec":
        if not isinstance(doc, dict):
            raise QueryTypeError("features must be an object")
        unknown = set(doc) - {"mean", "std", "glcm:contrast", "glcm_levels"}
        if unknown:
            raise UnknownField(f"unknown feature groups: {sorted(unknown)}")
        groups = {}
        for key in ("mean", "std", "glcm:contrast"):
            items = doc.get(key, [])
            if not isinstance(items, list):
                raise QueryTypeError(f"features.{key} must be a list")
            for item in items:
                if isinstance(item, bool) or not isinstance(item, (int, str)):
                    raise QueryTypeError(f"features.{key}: selectors are band indices or names")
            groups[key] = tuple(items)
        levels = doc.get("glcm_levels", 8)
        if isinstance(levels, bool) or not isinstance(levels, int):
            raise QueryTypeError("features.glcm_levels must be an integer")
        return cls(groups["mean"], groups["std"], groups["glcm:contrast"], levels)

    def to_dict(self):
        doc = {"mean": list(self.mean), "std": list(self.std),
               "glcm:contrast": list(self.glcm_contrast)}
        if self.glcm_levels != 8:
            doc["glcm_levels"] = self.glcm_levels
        return doc

    def names(self):
        return ([f"mean:{s}" for s in self.mean]
                + [f"std:{s}" for s in self.std]
                + [f"glcm:contrast:{s}" for s in self.glcm_contrast])

    def __len__(self):
        return len(self.mean) + len(self.std) + len(self.glcm_contrast)

    def violations(self, n_layers: int | None = None):
        out = []
        if self.glcm_levels < 2:
            out.append(f"glcm_levels must be >= 2, got {self.glcm_levels}")
        for group, items in (("mean", self.mean), ("std", self.std),
                             ("glcm:contrast", self.glcm_contrast)):
            for sel in items:
                if isinstance(sel, str):
                    if group == "glcm:contrast" and sel in DERIVED_INDICES:
                        out.append(f"features.{group}: contrast is not defined for {sel!r}")
                    elif sel not in DERIVED_INDICES + BAND_ROLES:
                        out.append(f"features.{group}: unknown selector {sel!r}")
                elif sel < 0 or (n_layers is not None and sel >= n_layers):
                    out.append(f"features.{group}: band index {sel} out of range")
        return out


DEFAULT_FEATURES = FeatureSpec(
    mean=(0, 1, 2, 3, "ndvi"), std=(0, 1, 2, 3, "ndvi"), glcm_contrast=(0, 1, 2, 3))


# -- spatial / temporal -----------------------------------------------------

@dataclass(frozen=True)
class PointSpatial:
    coordinates: tuple  # ((lat, lon), ...)

    def __len__(self):
        return len(self.coordinates)


@dataclass(frozen=True)
class SquareSpatial:
    corner1: tuple
    corner2: tuple

    @property
    def lat_range(self):
        return tuple(sorted((self.corner1[0], self.corner2[0])))

    @property
    def lon_range(self):
        return tuple(sorted((self.corner1[1], self.corner2[1])))


@dataclass(frozen=True)
class Temporal:
    snapshot: datetime | None = None
    search_window: timedelta | None = None


@dataclass(frozen=True)
class ModelBlock:
    mode: str
    id: str
    architecture: str | None = None
    labels: tuple | None = None
    window_size: int = 32
    filters: FilterSpec = FilterSpec()
    features: FeatureSpec | None = None
    params: dict = field(default_factory=dict)
    label_times: tuple | None = None


@dataclass(frozen=True)
class QuerySpec:
    layers: tuple
    spatial: PointSpatial | SquareSpatial
    temporal: Temporal = Temporal()
    model: ModelBlock | None = None

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def window_size(self):
        return self.model.window_size if self.model else None


# -- parsing ----------------------------------------------------------------

_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([smhd])\s*$")
_UNITS = {"s": 1, "m": 60, "h": 3600, "d": 86400}


def parse_duration(value) -> timedelta:
    """``"7d"``, ``"12h"``, ``"30m"``, ``"45s"`` or a number of seconds."""
    if _is_number(value):
        seconds = float(value)
    elif isinstance(value, str) and (m := _DURATION.match(value)):
        seconds = float(m.group(1)) * _UNITS[m.group(2)]
    else:
        raise QueryTypeError(f"cannot parse duration {value!r}")
    if seconds < 0 or not math.isfinite(seconds):
        raise QueryTypeError("durations must be finite and non-negative")
    try:
        return timedelta(seconds=seconds)
    except OverflowError:
        raise QueryTypeError(f"duration {value!r} is out of range") from None


def format_duration(delta: timedelta) -> str:
    seconds = delta.total_seconds()
    for unit in ("d", "h", "m"):
        n = seconds / _UNITS[unit]
        if n == int(n) and n != 0:
            return f"{int(n)}{unit}"
    return f"{int(seconds)}s" if seconds == int(seconds) else f"{seconds}s"


def parse_query(text, *, strict: bool = True) -> QuerySpec:
    """Parse a query document (JSON text, bytes or an already-decoded dict).

    Structural and type problems raise :class:`QueryError` subclasses.
    Semantic checks (label counts, layer existence...) are left to
    :func:`validate_query`. With ``strict=False`` unknown fields are
    reported as warnings instead of errors.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise QuerySyntaxError(f"query is not UTF-8: {exc}") from None
    if isinstance(text, str):
        if not text.strip():
            raise QuerySyntaxError("empty query document")
        try:
            doc = json.loads(text)
        except (json.JSONDecodeError, RecursionError) as exc:
            raise QuerySyntaxError(f"invalid JSON: {exc}") from None
    else:
        doc = text
    if not isinstance(doc, dict):
        raise QuerySyntaxError("query document must be a JSON object")
    _check_keys(doc, {"layers", "spatial", "temporal", "model"}, "query", strict)

    layers = _parse_layers(_require(doc, "layers", "query"))
    spatial = _parse_spatial(_require(doc, "spatial", "query"), strict)
    temporal = _parse_temporal(doc.get("temporal"), strict)
    model = None
    if doc.get("model") is not None:
        model = _parse_model(doc["model"], strict)
    return QuerySpec(layers, spatial, temporal, model)


def _check_keys(doc, allowed, where, strict):
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        msg = f"{where}: unknown fields {unknown}"
        if strict:
            raise UnknownField(msg)
        warnings.warn(msg, stacklevel=3)


def _require(doc, key, where):
    if key not in doc:
        raise QueryTypeError(f"{where}: missing field {key!r}")
    return doc[key]


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _parse_layers(doc):
    if not isinstance(doc, list):
        raise QueryTypeError("layers must be a list")
    ids = []
    for item in doc:
        if isinstance(item, str):
            ids.append(item)
        elif isinstance(item, dict):
            if item.get("type", "raster") != "raster":
                raise QueryTypeError(f"only raster layers are supported, got {item.get('type')!r}")
            unknown = set(item) - {"type", "id"}
            if unknown:
                raise UnknownField(f"layer: unknown fields {sorted(unknown)}")
            if not isinstance(item.get("id"), str):
                raise QueryTypeError("layer id must be a string")
            ids.append(item["id"])
        else:
            raise QueryTypeError("layers entries must be objects or strings")
    return tuple(ids)


def _number(value, where):
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise QueryTypeError(f"{where}: {value!r} is not a number") from None
    if not _is_number(value):
        raise QueryTypeError(f"{where}: expected a number, got {type(value).__name__}")
    return float(value)


def parse_coordinates(value):
    """Normalise any accepted coordinate encoding into ((lat, lon), ...)."""
    if isinstance(value, str):
        pairs = []
        for chunk in value.strip().strip("[]").split(";"):
            if not chunk.strip():
                continue
            parts = [p for p in re.split(r"[,\s]+", chunk.strip()) if p]
            if len(parts) != 2:
                raise QueryTypeError(f"coordinate entry {chunk!r} is not 'lat, lon'")
            pairs.append((_number(parts[0], "coordinates"), _number(parts[1], "coordinates")))
        return tuple(pairs)
    if not isinstance(value, list):
        raise QueryTypeError("coordinates must be a list or a 'lat, lon; ...' string")
    if all(isinstance(v, list) for v in value):
        pairs = []
        for v in value:
            if len(v) != 2:
                raise QueryTypeError("coordinate pairs must have two elements")
            pairs.append((_number(v[0], "coordinates"), _number(v[1], "coordinates")))
        return tuple(pairs)
    if len(value) % 2:
        raise QueryTypeError("flat coordinate lists must have an even length")
    flat = [_number(v, "coordinates") for v in value]
    return tuple(zip(flat[0::2], flat[1::2]))


def _parse_spatial(doc, strict):
    if not isinstance(doc, dict):
        raise QueryTypeError("spatial must be an object")
    _check_keys(doc, {"type", "coordinates"}, "spatial", strict)
    kind = doc.get("type")
    coords = parse_coordinates(_require(doc, "coordinates", "spatial"))
    for lat, lon in coords:
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise QueryTypeError("coordinates must be finite")
    if kind == "point":
        return PointSpatial(coords)
    if kind == "square":
        if len(coords) != 2:
            raise QueryTypeError("square spatial needs exactly two corners")
        return SquareSpatial(coords[0], coords[1])
    raise QueryTypeError(f"spatial.type must be 'point' or 'square', got {kind!r}")


def _parse_temporal(doc, strict):
    if doc is None:
        return Temporal()
    if not isinstance(doc, dict):
        raise QueryTypeError("temporal must be an object")
    _check_keys(doc, {"intervals", "search_window"}, "temporal", strict)
    snapshot = None
    intervals = doc.get("intervals", [])
    if not isinstance(intervals, list):
        raise QueryTypeError("temporal.intervals must be a list")
    if len(intervals) > 1:
        raise QueryTypeError("only a single temporal interval is supported")
    if intervals:
        interval = intervals[0]
        if not isinstance(interval, dict):
            raise QueryTypeError("temporal interval must be an object")
        _check_keys(interval, {"snapshot"}, "temporal.intervals[0]", strict)
        try:
            snapshot = parse_timestamp(_require(interval, "snapshot", "temporal interval"))
        except (TypeError, ValueError, OverflowError) as exc:
            raise QueryTypeError(str(exc)) from None
    window = doc.get("search_window")
    return Temporal(snapshot, None if window is None else parse_duration(window))


def parse_labels(value):
    if isinstance(value, str):
        items = [s.strip() for s in value.strip().strip("[]").split(";") if s.strip()]
        return tuple(int(s) if re.fullmatch(r"-?\d+", s) else s for s in items)
    if not isinstance(value, list):
        raise QueryTypeError("label must be a list or a 'y1; y2; ...' string")
    for item in value:
        if isinstance(item, bool) or not isinstance(item, (int, str)):
            raise QueryTypeError("labels must be integers or strings")
    return tuple(value)


def _parse_model(doc, strict):
    if not isinstance(doc, dict):
        raise QueryTypeError("model must be an object")
    _check_keys(doc, {"mode", "id", "architecture", "label", "label_time", "window_size",
                      "filters", "params"}, "model", strict)
    mode = _require(doc, "mode", "model")
    if mode not in MODES:
        raise QueryTypeError(f"model.mode must be 'train' or 'test', got {mode!r}")
    model_id = _require(doc, "id", "model")
    if not isinstance(model_id, str) or not model_id:
        raise QueryTypeError("model.id must be a non-empty string")
    arch = doc.get("architecture")
    if arch is not None and arch not in ARCHITECTURES:
        raise UnknownArchitecture(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    if mode == "train" and arch is None:
        raise QueryTypeError("train queries must name an architecture")
    labels = parse_labels(doc["label"]) if "label" in doc else None
    label_times = None
    if doc.get("label_time") is not None:
        raw = doc["label_time"]
        if not isinstance(raw, list):
            raise QueryTypeError("model.label_time must be a list")
        try:
            label_times = tuple(None if t is None else parse_timestamp(t) for t in raw)
        except (TypeError, ValueError, OverflowError) as exc:
            raise QueryTypeError(str(exc)) from None
    k = doc.get("window_size", 32)
    if isinstance(k, bool) or not isinstance(k, int):
        raise QueryTypeError("model.window_size must be an integer")
    filters = FilterSpec.from_dict(doc.get("filters"))
    params = doc.get("params", {})
    if not isinstance(params, dict):
        raise QueryTypeError("model.params must be an object")
    params = dict(params)
    if arch is not None:
        _check_keys(params, PARAM_KEYS[arch], "model.params", strict)
    features = None
    if "features" in params:
        features = FeatureSpec.from_dict(params.pop("features"))
    return ModelBlock(mode, model_id, arch, labels, k, filters, features, params, label_times)


# -- serialisation ----------------------------------------------------------

def query_to_dict(spec: QuerySpec) -> dict:
    doc = {"layers": [{"type": "raster", "id": layer} for layer in spec.layers]}
    if isinstance(spec.spatial, PointSpatial):
        doc["spatial"] = {"type": "point",
                          "coordinates": [[lat, lon] for lat, lon in spec.spatial.coordinates]}
    else:
        doc["spatial"] = {"type": "square",
                          "coordinates": [list(spec.spatial.corner1), list(spec.spatial.corner2)]}
    temporal = {}
    if spec.temporal.snapshot is not None:
        temporal["intervals"] = [{"snapshot": format_timestamp(spec.temporal.snapshot)}]
    if spec.temporal.search_window is not None:
        temporal["search_window"] = format_duration(spec.temporal.search_window)
    doc["temporal"] = temporal
    m = spec.model
    if m is not None:
        model = {"mode": m.mode, "id": m.id}
        if m.architecture is not None:
            model["architecture"] = m.architecture
        if m.labels is not None:
            model["label"] = list(m.labels)
        if m.label_times is not None:
            model["label_time"] = [None if t is None else format_timestamp(t) for t in m.label_times]
        model["window_size"] = m.window_size
        model["filters"] = m.filters.to_dict()
        params = dict(m.params)
        if m.features is not None:
            params["features"] = m.features.to_dict()
        model["params"] = params
        doc["model"] = model
    return doc


def serialize_query(spec: QuerySpec) -> str:
    return json.dumps(query_to_dict(spec), indent=2) + "\n"


def with_points(spec: QuerySpec, coordinates, labels=None, label_times=None) -> QuerySpec:
    """Copy of ``spec`` with its point list (and labels) replaced."""
    spatial = PointSpatial(tuple((float(a), float(b)) for a, b in coordinates))
    model = spec.model
    if model is not None:
        model = replace(model,
                        labels=None if labels is None else tuple(labels),
                        label_times=None if label_times is None else tuple(label_times))
    return replace(spec, spatial=spatial, model=model)


# -- validation ---------------------------------------------------------------

@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_query(spec: QuerySpec, store=None, registry=None) -> ValidationReport:
    """Collect every semantic problem with a parsed query."""
    out = []
    if len(spec.layers) < 1:
        out.append("at least one layer is required")
    if len(set(spec.layers)) != len(spec.layers):
        out.append("duplicate layer ids")
    if store is not None:
        for layer in spec.layers:
            if not store.has_layer(layer):
                out.append(f"unknown layer {layer!r}")
    if isinstance(spec.spatial, SquareSpatial):
        if tuple(spec.spatial.corner1) == tuple(spec.spatial.corner2):
            out.append("square corners must be distinct")
        elif (spec.spatial.corner1[0] == spec.spatial.corner2[0]
              or spec.spatial.corner1[1] == spec.spatial.corner2[1]):
            out.append("square has zero area")
    elif len(spec.spatial) < 1:
        out.append("at least one coordinate is required")
    if spec.temporal.search_window is not None and spec.temporal.search_window < timedelta(0):
        out.append("search window must be non-negative")

    m = spec.model
    if m is not None:
        if m.window_size < 1:
            out.append(f"window_size must be >= 1, got {m.window_size}")
        out.extend(m.filters.violations())
        if m.mode == "train":
            if isinstance(spec.spatial, SquareSpatial):
                out.append("train queries need a point list, not a square")
            elif m.labels is None:
                out.append("train queries need a label list")
            elif len(m.labels) != len(spec.spatial):
                out.append(f"label count mismatch: {len(spec.spatial)} coordinates, "
                           f"{len(m.labels)} labels")
            elif len(m.labels) < 1:
                out.append("train queries need at least one labeled point")
            if m.label_times is not None and len(m.label_times) != len(spec.spatial):
                out.append("label_time count mismatch")
            if m.architecture == "random_forest":
                if m.features is None:
                    out.append("random_forest training needs params.features")
                elif len(m.features) == 0:
                    out.append("feature spec selects no features")
            if m.features is not None:
                out.extend(m.features.violations(len(spec.layers)))
        else:
            if m.labels is not None:
                out.append("test queries must not carry labels")
            if registry is not None and not registry.exists(m.id):
                out.append(f"unknown model id {m.id!r}")
    return ValidationReport(out)
