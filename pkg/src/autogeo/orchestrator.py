"""
End-to-end training and inference services.

Training: assemble patches -> quality filter -> stratified split ->
random forest (features + grid search) or CNN -> test-set evaluation ->
model record in the registry.

Inference: point list or bounding box -> k x k tiles -> quality filter
(filtered tiles become None) -> batch classification -> map.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone

import numpy as np

from .errors import (
    InsufficientClassSamples,
    InvalidQuery,
    ModelExists,
    ShapeMismatch,
    WindowOutOfCoverage,
)
from .features import build_feature_matrix
from .manifest import Manifest, sorted_classes
from .maps import ClassificationMap
from .models.cnn import cnn_train, config_from_params
from .models.evaluate import evaluate
from .models.forest import DEFAULT_GRID, RandomForestConfig, rf_grid_search
from .patches import (
    LabeledPoint,
    Patch,
    PatchSet,
    assemble_patches,
    assemble_points,
    points_from_query,
)
from .quality import apply_filters, ndvi_bands, rejection_record
from .query import FilterSpec, PointSpatial, QuerySpec, SquareSpatial, validate_query
from .raster_store import RasterStore, format_timestamp
from .registry import ModelRecord, ModelRegistry, make_blob


@dataclass(frozen=True)
class SplitSpec:
    """Per-class hold-out sizes for validation and test."""

    validation: int = 500
    test: int = 500
    seed: int = 0


def stratified_split(labels, split: SplitSpec, classes=None):
    """Split sample indices into (train, validation, test).

    Every class contributes exactly ``split.validation`` and ``split.test``
    samples to the hold-outs; the rest train. Each subset is sorted.
    """
    labels = list(labels)
    classes = sorted_classes(labels) if classes is None else list(classes)
    rng = np.random.default_rng(split.seed)
    by_class = {c: [] for c in classes}
    for i, y in enumerate(labels):
        by_class[y].append(i)
    need = split.validation + split.test + 1
    train, val, test = [], [], []
    for c in classes:
        idx = np.asarray(by_class[c], dtype=np.int64)
        if len(idx) < need:
            raise InsufficientClassSamples(c, len(idx), need)
        perm = idx[rng.permutation(len(idx))]
        val.extend(perm[:split.validation])
        test.extend(perm[split.validation:split.validation + split.test])
        train.extend(perm[split.validation + split.test:])
    return np.sort(train), np.sort(val), np.sort(test)


def _split_from_params(params, default: SplitSpec, seed):
    doc = params.get("split", {})
    split = SplitSpec(doc.get("validation", default.validation), doc.get("test", default.test),
                      doc.get("seed", default.seed))
    return split if seed is None else replace(split, seed=seed)


def _ndvi_indices(patches: PatchSet, params):
    try:
        return ndvi_bands(patches.band_roles, params.get("band_roles"))
    except Exception:
        return None


def run_training_query(spec: QuerySpec, store: RasterStore, registry: ModelRegistry, *,
                       workers: int = 4, overwrite: bool = False, seed: int | None = None,
                       split: SplitSpec = SplitSpec(), classes=None, n_jobs: int = 1):
    """Execute a train-mode query; returns (ModelRecord, TrainReport)."""
    report = validate_query(spec, store)
    if spec.model is None or spec.model.mode != "train":
        report.violations.append("not a train-mode query")
    if not report.ok:
        raise InvalidQuery(report.violations)
    m = spec.model
    if registry.exists(m.id) and not overwrite:
        raise ModelExists(f"model {m.id!r} already exists")
    start = time.perf_counter()
    params = m.params

    patches = assemble_patches(spec, store, workers=workers)
    retained, rejected = apply_filters(patches, m.filters,
                                       band_roles_override=params.get("band_roles"))
    class_list = sorted_classes(m.labels) if classes is None else list(classes)
    index_of = {c: i for i, c in enumerate(class_list)}
    labels = np.array([index_of[p.point.label] for p in retained], dtype=np.int64)
    split = _split_from_params(params, split, seed)
    tr, va, te = stratified_split([p.point.label for p in retained], split, class_list)
    ndvi_idx = _ndvi_indices(retained, params)
    details = {
        "model_id": m.id,
        "architecture": m.architecture,
        "n_points": len(patches),
        "n_rejected": len(rejected),
        "n_train": len(tr),
        "n_validation": len(va),
        "n_test": len(te),
        "rejected": [rejection_record(p) for p in rejected],
    }

    if m.architecture == "random_forest":
        X = build_feature_matrix(retained, m.features, red_index=_red(ndvi_idx),
                                 nir_index=_nir(ndvi_idx))
        grid = params.get("grid", {})
        grid = {
            "n_estimators": grid.get("n_estimators", params.get("n_estimators", DEFAULT_GRID["n_estimators"])),
            "max_depth": grid.get("max_depth", params.get("max_depth", DEFAULT_GRID["max_depth"])),
        }
        grid = {k: v if isinstance(v, (list, tuple)) else [v] for k, v in grid.items()}
        base = RandomForestConfig(
            features_per_split=params.get("features_per_split"),
            bootstrap=params.get("bootstrap", True),
            seed=params.get("seed", 0) if seed is None else seed,
        )
        result = rf_grid_search(X[tr], labels[tr], X[va], labels[va], grid, base,
                                n_classes=len(class_list), n_jobs=n_jobs)
        model = result.best_model
        predictions = model.predict(X[te])[0]
        details["best_config"] = result.best_config.to_dict()
        details["feature_names"] = m.features.names()
        scores = result.table()
    else:
        values = retained.stack()
        cfg = config_from_params(params, input_channels=len(spec.layers),
                                 n_classes=len(class_list), architecture=m.architecture)
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        model = cnn_train(values[tr], labels[tr], cfg)
        predictions = model.predict(values[te])[0]
        val_acc = float(np.mean(model.predict(values[va])[0] == labels[va]))
        details["config"] = cfg.to_dict()
        details["validation_accuracy"] = val_acc
        details["epoch_loss"] = model.history.epoch_loss
        details["first_batch_loss"] = model.history.first_batch_loss
        scores = [{"config": "final", "accuracy": val_acc}]

    report = evaluate(predictions, labels[te], classes=class_list)
    report.scores = scores
    report.details = details
    report.wall_time = time.perf_counter() - start

    blob = make_blob(m.id, m.architecture, model, layer_ids=spec.layers,
                     window_size=m.window_size, classes=class_list,
                     feature_spec=m.features if m.architecture == "random_forest" else None,
                     filter_spec=m.filters, band_roles=patches.band_roles, ndvi_bands=ndvi_idx)
    record = ModelRecord.from_blob(blob, report=report,
                                   created=format_timestamp(datetime.now(timezone.utc)))
    registry.put(record, overwrite=overwrite)
    return record, report


def _red(idx):
    return None if idx is None else idx[0]


def _nir(idx):
    return None if idx is None else idx[1]


# -- inference -----------------------------------------------------------------

@dataclass(frozen=True)
class PointResult:
    lat: float
    lon: float
    value: int | None
    label: object = None
    reason: str | None = None

    def to_dict(self):
        return {"lat": self.lat, "lon": self.lon, "class": self.value, "label": self.label,
                "reason": self.reason}


def _snap(value, rounding):
    nearest = round(value)
    if abs(value - nearest) < 1e-6:
        return int(nearest)
    return int(rounding(value))


def bbox_to_pixels(grid, spatial: SquareSpatial):
    """Snap a lat/lon box outward to whole pixels: (row0, col0, row1, col1)."""
    lat_min, lat_max = spatial.lat_range
    lon_min, lon_max = spatial.lon_range
    row0 = _snap((grid.origin_lat - lat_max) / grid.resolution, math.floor)
    row1 = _snap((grid.origin_lat - lat_min) / grid.resolution, math.ceil)
    col0 = _snap((lon_min - grid.origin_lon) / grid.resolution, math.floor)
    col1 = _snap((lon_max - grid.origin_lon) / grid.resolution, math.ceil)
    return row0, col0, row1, col1


def _check_compatible(spec: QuerySpec, record: ModelRecord):
    if tuple(spec.layers) != tuple(record.layer_ids):
        raise ShapeMismatch(f"query layers {list(spec.layers)} differ from model layers "
                            f"{list(record.layer_ids)}")
    if spec.model is not None and spec.model.window_size != record.window_size:
        raise ShapeMismatch(f"query window_size {spec.model.window_size} differs from model "
                            f"window size {record.window_size}")


def classify_patchset(record: ModelRecord, patches: PatchSet, filt: FilterSpec, classifier=None):
    """Filter then classify; returns ({index: class}, {index: reason})."""
    ndvi = record.ndvi_bands
    override = None if ndvi is None else {"red": ndvi[0], "nir": ndvi[1]}
    retained, rejected = apply_filters(patches, filt, band_roles_override=override)
    reasons = {p.index: p.reason for p in rejected}
    out = {}
    if len(retained):
        classifier = classifier or record.classifier()
        preds, _ = classifier.predict(retained.stack())
        out = {p.index: int(c) for p, c in zip(retained, preds)}
    return out, reasons


def run_inference_query(spec: QuerySpec, store: RasterStore, registry: ModelRegistry, *,
                        filter_override: FilterSpec | None = None, workers: int = 4):
    """Execute a test-mode query.

    A point list gives a list of PointResult; a square gives a
    ClassificationMap.
    """
    report = validate_query(spec, store, registry)
    if spec.model is None or spec.model.mode != "test":
        report.violations.append("not a test-mode query")
    if not report.ok:
        if any(v.startswith("unknown model id") for v in report.violations):
            registry.get(spec.model.id)  # raises UnknownModel
        raise InvalidQuery(report.violations)
    record = registry.get(spec.model.id)
    _check_compatible(spec, record)
    filt = record.filter_spec if filter_override is None else filter_override
    k = record.window_size
    snapshot = spec.temporal.snapshot
    window = spec.temporal.search_window
    classifier = record.classifier()

    if isinstance(spec.spatial, PointSpatial):
        patches = assemble_points(store, points_from_query(spec), record.layer_ids, k,
                                  snapshot, window, workers=workers, allow_empty=True)
        classes, reasons = classify_patchset(record, patches, filt, classifier)
        results = []
        for p in patches:
            value = classes.get(p.index)
            results.append(PointResult(p.point.lat, p.point.lon, value,
                                       None if value is None else record.classes[value],
                                       reasons.get(p.index)))
        return results

    row0, col0, row1, col1 = bbox_to_pixels(store.grid, spec.spatial)
    R, C = (row1 - row0) // k, (col1 - col0) // k
    if R < 1 or C < 1:
        raise InvalidQuery([f"bounding box is smaller than one {k}x{k} tile"])
    c = len(record.layer_ids)
    block = np.empty((R * k, C * k, c), dtype=np.float32)
    valid = np.ones((R * k, C * k), dtype=bool)
    stamps = []
    for i, layer in enumerate(record.layer_ids):
        if snapshot is None:
            ts = store.snapshots(layer)[-1]  # latest when no time is given
        else:
            ts = store.resolve_timestamp(layer, snapshot, window)
        stamps.append(ts)
        try:
            values, mask = store.read_block(layer, ts, row0, col0, R * k, C * k)
        except WindowOutOfCoverage:
            raise WindowOutOfCoverage("bounding box lies outside the data coverage") from None
        block[:, :, i] = values
        valid &= mask
    tiles = block.reshape(R, k, C, k, c).transpose(0, 2, 1, 3, 4)
    tile_valid = valid.reshape(R, k, C, k).transpose(0, 2, 1, 3)
    patches = []
    for r in range(R):
        for cc in range(C):
            lat, lon = store.grid.pixel_to_geo(row0 + r * k + k // 2, col0 + cc * k + k // 2)
            p = Patch(r * C + cc, LabeledPoint(lat, lon), np.ascontiguousarray(tiles[r, cc]),
                      tile_valid[r, cc].copy(), tuple(stamps))
            if not p.valid.all():
                p = p.reject("PartialCoverage")
            patches.append(p)
    pset = PatchSet(patches, tuple(record.layer_ids), record.band_roles, k)
    classes, reasons = classify_patchset(record, pset, filt, classifier)
    values = [[classes.get(r * C + cc) for cc in range(C)] for r in range(R)]
    lat_n, lon_w = store.grid.pixel_edges(row0, col0)
    lat_s, lon_e = store.grid.pixel_edges(row0 + R * k, col0 + C * k)
    return ClassificationMap(
        values=values,
        classes=list(record.classes),
        k=k,
        resolution=store.grid.resolution,
        pixel_box=(row0, col0, row0 + R * k, col0 + C * k),
        bbox=(lat_s, lat_n, lon_w, lon_e),
        model_id=record.id,
        snapshot=None if snapshot is None else format_timestamp(snapshot),
        reasons={divmod(i, C): reason for i, reason in reasons.items()},
    )


def run_evaluation(model_id: str, manifest: Manifest, store: RasterStore,
                   registry: ModelRegistry, *, workers: int = 4):
    """Score a stored model against a labeled manifest (after its quality filter)."""
    record = registry.get(model_id)
    patches = assemble_points(store, manifest.points, record.layer_ids, record.window_size,
                              manifest.snapshot, manifest.search_window, workers=workers)
    index_of = {c: i for i, c in enumerate(record.classes)}
    unknown = {p.point.label for p in patches} - set(index_of)
    if unknown:
        raise ValueError(f"manifest labels unknown to model: {sorted(map(str, unknown))}")
    classes, reasons = classify_patchset(record, patches, record.filter_spec)
    kept = [p for p in patches if p.index in classes]
    if not kept:
        raise ValueError("every manifest point was rejected")
    report = evaluate([classes[p.index] for p in kept],
                      [index_of[p.point.label] for p in kept], classes=record.classes)
    report.details = {
        "model_id": model_id,
        "n_points": len(patches),
        "n_evaluated": len(kept),
        "n_rejected": len(reasons),
    }
    return report


def run_data_query(spec: QuerySpec, store: RasterStore, *, max_pixels: int = 1 << 20):
    """Raw pixel values for a query without a model block.

    Points give the value of each layer at each coordinate; a square gives
    the snapped pixel block per layer (NaN becomes None).
    """
    report = validate_query(spec, store)
    if not report.ok:
        raise InvalidQuery(report.violations)
    grid = store.grid
    snapshot, window = spec.temporal.snapshot, spec.temporal.search_window
    stamps = {}
    for layer in spec.layers:
        stamps[layer] = (store.snapshots(layer)[-1] if snapshot is None
                         else store.resolve_timestamp(layer, snapshot, window))
    out = {"layers": list(spec.layers),
           "timestamps": {k: format_timestamp(v) for k, v in stamps.items()}}
    if isinstance(spec.spatial, PointSpatial):
        values = []
        for lat, lon in spec.spatial.coordinates:
            row, col = grid.geo_to_pixel(lat, lon)
            entry = {"lat": lat, "lon": lon, "values": {}}
            for layer in spec.layers:
                try:
                    v, ok = store.read_block(layer, stamps[layer], int(row), int(col), 1, 1)
                    entry["values"][layer] = float(v[0, 0]) if ok[0, 0] else None
                except WindowOutOfCoverage:
                    entry["values"][layer] = None
            values.append(entry)
        out["points"] = values
        return out
    row0, col0, row1, col1 = bbox_to_pixels(grid, spec.spatial)
    n = (row1 - row0) * (col1 - col0)
    if n > max_pixels:
        raise InvalidQuery([f"square covers {n} pixels, limit is {max_pixels}"])
    out["pixel_box"] = [row0, col0, row1, col1]
    out["bands"] = {}
    for layer in spec.layers:
        v, ok = store.read_block(layer, stamps[layer], row0, col0, row1 - row0, col1 - col0)
        out["bands"][layer] = [[float(x) if m else None for x, m in zip(vr, mr)]
                               for vr, mr in zip(v, ok)]
    return out
