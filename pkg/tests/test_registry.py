import json
import struct

import numpy as np
import pytest

from autogeo.errors import BlobFormatError, ModelExists, UnknownModel
from autogeo.models.blob import FORMAT_VERSION, MAGIC, pack_blob, read_header, unpack_blob
from autogeo.models.cnn import FlexCnnConfig, cnn_train
from autogeo.models.evaluate import evaluate
from autogeo.models.forest import RandomForestConfig, rf_train
from autogeo.query import DEFAULT_FEATURES, FilterSpec
from autogeo.registry import Classifier, ModelRecord, ModelRegistry, make_blob

ROLES = ("red", "green", "blue", "nir")


def patches(n=12, k=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(10, 100, (n, k, k, 4)).astype(np.float32)
    y = np.arange(n) % 2
    x[y == 1, ..., 3] += 100
    return x, y


def rf_blob(model_id="m", seed=0):
    x, y = patches()
    clf_probe = Classifier({"architecture": "random_forest", "window_size": 4, "classes": ["a", "b"],
                            "feature_spec": DEFAULT_FEATURES.to_dict(), "band_roles": list(ROLES),
                            "ndvi_bands": [0, 3]}, None)
    X = clf_probe.features(x)
    model = rf_train(X, y, RandomForestConfig(n_estimators=4, max_depth=3, seed=seed))
    blob = make_blob(model_id, "random_forest", model, layer_ids=ROLES, window_size=4,
                     classes=["a", "b"], feature_spec=DEFAULT_FEATURES,
                     filter_spec=FilterSpec.from_dict({"ndvi": {"min": 0}}), band_roles=ROLES,
                     ndvi_bands=(0, 3))
    return blob, model, X


def test_blob_round_trip_preserves_arrays_and_dtypes():
    arrays = [("a", np.arange(6, dtype=np.int32).reshape(2, 3)),
              ("b", np.array([0.5, -1.25], dtype=np.float32)),
              ("c", np.zeros((0,), dtype=np.float32))]
    blob = pack_blob({"x": 1}, arrays)
    assert blob[:8] == MAGIC
    header, out = unpack_blob(blob)
    assert header["x"] == 1 and header["format_version"] == FORMAT_VERSION
    for name, arr in arrays:
        assert out[name].dtype == arr.dtype and np.array_equal(out[name], arr)


def test_blob_format_errors():
    blob = pack_blob({}, [("a", np.ones(3, dtype=np.float32))])
    with pytest.raises(BlobFormatError, match="magic"):
        read_header(b"NOTAMODL" + blob[8:])
    with pytest.raises(BlobFormatError, match="version"):
        read_header(blob[:8] + struct.pack("<I", FORMAT_VERSION + 1) + blob[12:])
    with pytest.raises(BlobFormatError, match="truncated"):
        unpack_blob(blob[:-2])
    with pytest.raises(BlobFormatError, match="trailing"):
        unpack_blob(blob + b"\0\0\0\0")
    with pytest.raises(BlobFormatError):
        read_header(b"abc")
    with pytest.raises(BlobFormatError, match="float32"):
        pack_blob({}, [("big", np.array([2 ** 25 + 1], dtype=np.int64))])


def test_forest_classifier_from_blob_matches_model():
    blob, model, X = rf_blob()
    x, _ = patches()
    clf = Classifier.from_blob(blob)
    assert clf.model.same_as(model)
    assert np.array_equal(clf.predict(x)[0], model.predict(X)[0])


def test_cnn_classifier_from_blob_matches_model():
    x, y = patches(k=8)
    cfg = FlexCnnConfig(input_channels=4, n_classes=2, widths=(4,), epochs=1, batch_size=6)
    model = cnn_train(x, y, cfg)
    blob = make_blob("c", "flexcnn", model, layer_ids=ROLES, window_size=8, classes=["a", "b"])
    clf = Classifier.from_blob(blob)
    assert np.array_equal(clf.predict(x)[1], model.predict(x)[1])


def test_registry_put_get_list(tmp_path):
    reg = ModelRegistry(tmp_path / "models")
    blob, _, _ = rf_blob("trees/v1")
    report = evaluate([0, 1, 1], [0, 1, 0], classes=["a", "b"])
    record = ModelRecord.from_blob(blob, report=report, created="2018-01-29T12:00:00Z")
    reg.put(record)
    got = reg.get("trees/v1")
    assert got.blob == blob and got.metadata() == record.metadata()
    assert got.filter_spec.bounds[0].name == "ndvi.mean"
    assert got.ndvi_bands == (0, 3)
    assert reg.list() == ["trees/v1"] and reg.exists("trees/v1")
    with pytest.raises(UnknownModel):
        reg.get("nope")


def test_overwrite_archives_previous_version(tmp_path):
    reg = ModelRegistry(tmp_path)
    first = ModelRecord.from_blob(rf_blob(seed=0)[0])
    second = ModelRecord.from_blob(rf_blob(seed=1)[0])
    reg.put(first)
    with pytest.raises(ModelExists):
        reg.put(second)
    assert reg.get("m").blob == first.blob
    reg.put(second, overwrite=True)
    assert reg.get("m").blob == second.blob
    assert [r.blob for r in reg.archived("m")] == [first.blob]
    assert reg.archived("other") == []


def test_blob_alone_is_enough_for_inference(tmp_path):
    blob, model, X = rf_blob()
    reg = ModelRegistry(tmp_path)
    reg.put(ModelRecord.from_blob(blob))
    (tmp_path / "m" / "record.json").write_text(json.dumps({"id": "m"}))
    rec = reg.get("m")
    assert rec.layer_ids == ROLES and rec.window_size == 4 and rec.classes == ["a", "b"]
    assert rec.feature_spec == DEFAULT_FEATURES
    assert np.array_equal(rec.classifier().model.predict(X)[0], model.predict(X)[0])
