import json
import warnings
from datetime import timedelta
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from autogeo.errors import QueryError, QuerySyntaxError, QueryTypeError, UnknownArchitecture, UnknownField
from autogeo.query import (
    DEFAULT_FEATURES,
    FeatureSpec,
    FilterSpec,
    PointSpatial,
    SquareSpatial,
    format_duration,
    parse_coordinates,
    parse_duration,
    parse_labels,
    parse_query,
    query_to_dict,
    serialize_query,
    validate_query,
    with_points,
)
from autogeo.raster_store import format_timestamp

GOLDEN = Path(__file__).resolve().parent.parent / "docs" / "golden"


def golden(name):
    return parse_query((GOLDEN / name).read_text())


# -- golden documents ----------------------------------------------------------

def test_data_query_golden():
    spec = golden("data_query.json")
    assert spec.layers == ("50060", "50061", "50062", "50063")
    assert spec.n_layers == 4
    assert isinstance(spec.spatial, PointSpatial) and len(spec.spatial) == 1
    assert format_timestamp(spec.temporal.snapshot) == "2018-01-29T12:00:00Z"
    assert spec.model is None


def test_train_rf_golden_has_fourteen_features():
    spec = golden("train_rf.json")
    m = spec.model
    assert m.mode == "train" and m.architecture == "random_forest"
    assert m.id == "tree_species_random_forest"
    assert m.window_size == 32
    assert m.labels == ("cedar_elm", "live_oak", "pecan")
    assert len(spec.spatial) == 3
    assert m.features == DEFAULT_FEATURES
    assert len(m.features) == 14
    assert m.features.names()[:2] == ["mean:0", "mean:1"]
    assert m.filters.bounds[0].name == "ndvi.mean" and m.filters.bounds[0].min == 0.0
    assert validate_query(spec).ok


def test_train_resnet_and_test_goldens():
    train = golden("train_resnet.json")
    assert train.model.architecture == "resnet" and train.model.features is None
    test = golden("test_resnet.json")
    assert test.model.mode == "test" and test.model.labels is None
    assert isinstance(test.spatial, SquareSpatial)
    assert test.spatial.lat_range == (32.9, 32.91)
    assert test.spatial.lon_range == (-96.81, -96.8)


@pytest.mark.parametrize("name", sorted(p.name for p in GOLDEN.glob("*.json")))
def test_goldens_round_trip(name):
    spec = golden(name)
    assert parse_query(serialize_query(spec)) == spec


# -- encodings -------------------------------------------------------------------

def test_coordinate_encodings_agree():
    pairs = ((1.5, -2.0), (3.0, 4.25))
    assert parse_coordinates([[1.5, -2.0], [3.0, 4.25]]) == pairs
    assert parse_coordinates([1.5, -2.0, 3.0, 4.25]) == pairs
    assert parse_coordinates("1.5, -2.0; 3.0, 4.25") == pairs
    assert parse_coordinates("[1.5 -2.0;3.0,4.25]") == pairs
    with pytest.raises(QueryTypeError):
        parse_coordinates([1.0, 2.0, 3.0])
    with pytest.raises(QueryTypeError):
        parse_coordinates("1.0; 2.0")


def test_label_encodings():
    assert parse_labels("a; b ;c") == ("a", "b", "c")
    assert parse_labels("0;1;-2") == (0, 1, -2)
    assert parse_labels([3, "x"]) == (3, "x")
    with pytest.raises(QueryTypeError):
        parse_labels([1.5])
    with pytest.raises(QueryTypeError):
        parse_labels([True])


@pytest.mark.parametrize("text, seconds", [
    ("7d", 7 * 86400), ("12h", 43200), ("30m", 1800), ("45s", 45), (90, 90), ("1.5h", 5400),
])
def test_durations(text, seconds):
    assert parse_duration(text) == timedelta(seconds=seconds)
    assert parse_duration(format_duration(parse_duration(text))) == parse_duration(text)


@pytest.mark.parametrize("bad", ["7 weeks", "-1d", -5, True, None, "1e400d"])
def test_bad_durations(bad):
    with pytest.raises(QueryTypeError):
        parse_duration(bad)


def test_filter_keys():
    f = FilterSpec.from_dict({"ndvi": {"min": 0.0}, "ndvi.std": {"max": 0.2}, "2.max": {"max": 9},
                              "nir": {"min": 1}})
    names = [b.name for b in f.bounds]
    assert names == ["ndvi.mean", "ndvi.std", "2.max", "nir.mean"]
    assert f.bounds[2].selector == 2
    assert FilterSpec.from_dict(f.to_dict()) == f
    with pytest.raises(QueryTypeError):
        FilterSpec.from_dict({"ndvi.median": {"min": 0}})
    with pytest.raises(UnknownField):
        FilterSpec.from_dict({"ndvi": {"above": 0}})
    assert FilterSpec.from_dict({"ndvi": {"min": 1, "max": 0}}).violations()


def test_feature_spec_checks():
    assert FeatureSpec(glcm_contrast=("ndvi",)).violations()
    assert FeatureSpec(mean=(4,)).violations(n_layers=4)
    assert not DEFAULT_FEATURES.violations(n_layers=4)
    with pytest.raises(UnknownField):
        FeatureSpec.from_dict({"median": [0]})


# -- strictness and errors -----------------------------------------------------------

def _doc(**model):
    doc = json.loads((GOLDEN / "train_rf.json").read_text())
    doc["model"].update(model)
    return doc


def test_unknown_fields_strict_and_lenient():
    doc = _doc(colour="blue")
    with pytest.raises(UnknownField):
        parse_query(doc)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        spec = parse_query(doc, strict=False)
    assert spec.model.id == "tree_species_random_forest"
    assert any("colour" in str(w.message) for w in caught)


def test_parse_errors():
    with pytest.raises(QuerySyntaxError):
        parse_query("{not json")
    with pytest.raises(QuerySyntaxError):
        parse_query("[]")
    with pytest.raises(UnknownArchitecture):
        parse_query(_doc(architecture="svm"))
    with pytest.raises(QueryTypeError):
        parse_query(_doc(window_size="32"))
    with pytest.raises(QueryTypeError):
        parse_query(_doc(mode="predict"))


def test_validation_collects_semantic_problems():
    spec = parse_query(_doc(label="a;b"))
    report = validate_query(spec)
    assert not report.ok
    assert any("label count mismatch" in v for v in report.violations)
    test = parse_query(_doc(mode="test"))
    assert any("must not carry labels" in v for v in validate_query(test).violations)


def test_with_points_replaces_points_and_labels():
    spec = golden("train_rf.json")
    new = with_points(spec, [(1, 2), (3, 4)], labels=["x", "y"])
    assert new.spatial.coordinates == ((1.0, 2.0), (3.0, 4.0))
    assert new.model.labels == ("x", "y")
    assert validate_query(new).ok


# -- properties --------------------------------------------------------------------

coords = st.floats(-89, 89, allow_nan=False)
ident = st.text("abcdefghij_0123456789", min_size=1, max_size=8)


@st.composite
def query_docs(draw):
    n = draw(st.integers(1, 5))
    layers = draw(st.lists(ident, min_size=1, max_size=4, unique=True))
    doc = {
        "layers": [{"type": "raster", "id": i} for i in layers],
        "spatial": {"type": "point",
                    "coordinates": [[draw(coords), draw(coords)] for _ in range(n)]},
        "temporal": {"intervals": [{"snapshot": "2018-01-29T12:00:00Z"}],
                     "search_window": draw(st.sampled_from(["7d", "12h", "90s"]))},
    }
    if draw(st.booleans()):
        arch = draw(st.sampled_from(["random_forest", "resnet", "flexcnn"]))
        model = {"mode": "train", "id": draw(ident), "architecture": arch,
                 "label": draw(st.lists(st.one_of(ident, st.integers(0, 9)), min_size=n, max_size=n)),
                 "window_size": draw(st.integers(1, 64)),
                 "filters": {"ndvi": {"min": draw(st.floats(-1, 1))}}}
        if arch == "random_forest":
            model["params"] = {"features": {"mean": [0, "ndvi"], "std": [0],
                                            "glcm:contrast": [0]},
                               "grid": {"n_estimators": [5], "max_depth": [3]}}
        else:
            model["params"] = {"epochs": draw(st.integers(1, 5))}
        doc["model"] = model
    return doc


@given(query_docs())
def test_serialise_parse_round_trip(doc):
    spec = parse_query(doc)
    again = parse_query(serialize_query(spec))
    assert again == spec
    assert query_to_dict(again) == query_to_dict(spec)


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False) | st.text(max_size=5),
    lambda children: st.lists(children, max_size=4) | st.dictionaries(st.text(max_size=6), children, max_size=4),
    max_leaves=20,
)


@given(st.one_of(
    json_values,
    st.fixed_dictionaries({"layers": json_values, "spatial": json_values}),
    st.fixed_dictionaries({"layers": st.just([{"type": "raster", "id": "a"}]),
                           "spatial": st.fixed_dictionaries({"type": st.sampled_from(["point", "square"]),
                                                             "coordinates": json_values}),
                           "temporal": json_values, "model": json_values}),
))
def test_arbitrary_documents_parse_or_raise_query_errors(doc):
    try:
        spec = parse_query(json.dumps(doc))
    except QueryError:
        return
    validate_query(spec)


@given(st.binary(max_size=64))
def test_arbitrary_bytes_parse_or_raise_query_errors(data):
    try:
        parse_query(data)
    except QueryError:
        pass
