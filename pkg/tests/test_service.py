import json
import threading
import urllib.error
import urllib.request

import pytest

from autogeo.config import Settings
from autogeo.maps import read_ppm
from autogeo.registry import ModelRegistry
from autogeo.service import AutogeoService
from autogeo.synth import emit_label_manifest, test_query_doc, train_query_doc

K = 16
BOX = (96, 96, 256, 256)


@pytest.fixture(scope="module")
def server(small_world, world_store, tmp_path_factory):
    registry = ModelRegistry(tmp_path_factory.mktemp("svc") / "models")
    service = AutogeoService(world_store, registry, Settings(validation=5, test=5, workers=2))
    httpd = service.make_server("127.0.0.1", 0)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    host, port = httpd.server_address[:2]
    yield service, f"http://{host}:{port}"
    httpd.shutdown()
    httpd.server_close()
    service.jobs.shutdown()


def call(url, body=None, accept=None):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method="GET" if body is None else "POST")
    if accept:
        req.add_header("Accept", accept)
    try:
        with urllib.request.urlopen(req, timeout=60) as resp:
            return resp.status, resp.headers.get("Content-Type"), resp.read()
    except urllib.error.HTTPError as err:
        return err.code, err.headers.get("Content-Type"), err.read()


def call_json(url, body=None):
    status, _, raw = call(url, body)
    return status, json.loads(raw)


@pytest.fixture(scope="module")
def trained(server, small_world):
    service, base = server
    manifest, _ = emit_label_manifest(small_world, 20, window_size=K, seed=4)
    doc = train_query_doc(small_world.spec, manifest, "random_forest", "svc_rf", window_size=K,
                          params={"grid": {"n_estimators": [10], "max_depth": [8]}})
    status, body = call_json(base + "/v2/query", doc)
    assert status == 202
    job = service.jobs.wait(body["job_id"], timeout=120)
    return doc, body["job_id"], job


def test_training_job_lifecycle(server, trained):
    _, base = server
    doc, job_id, job = trained
    assert job["status"] == "done", job
    status, polled = call_json(f"{base}/v2/jobs/{job_id}")
    assert status == 200 and polled["report"]["accuracy"] >= 0.9
    assert polled["model_id"] == "svc_rf"
    status, models = call_json(base + "/v2/models")
    assert models == {"models": ["svc_rf"]}
    status, meta = call_json(base + "/v2/models/svc_rf")
    assert meta["window_size"] == K and meta["architecture"] == "random_forest"
    # same id without overwrite
    status, err = call_json(base + "/v2/query", doc)
    assert status == 409 and err["error"] == "ModelExists"


def test_overwrite_query_string_retrains(server, trained):
    service, base = server
    doc = trained[0]
    status, body = call_json(base + "/v2/query?overwrite=1", doc)
    assert status == 202
    assert service.jobs.wait(body["job_id"], timeout=120)["status"] == "done"
    assert len(service.registry.archived("svc_rf")) >= 1


def test_area_inference_json_and_ppm(server, trained, small_world):
    _, base = server
    doc = test_query_doc(small_world.spec, "svc_rf", BOX, window_size=K)
    status, cmap = call_json(base + "/v2/query", doc)
    assert status == 200
    assert (cmap["rows"], cmap["cols"]) == (10, 10)
    assert cmap["values"][5][5] is None
    assert cmap["georeference"]["pixel_box"] == list(BOX)
    status, ctype, raw = call(base + "/v2/query", doc, accept="image/x-portable-pixmap")
    assert status == 200 and ctype == "image/x-portable-pixmap"
    img = read_ppm(raw)
    assert img.shape == (10, 10, 3) and img[5, 5].tolist() == [0, 0, 0]


def test_point_and_data_queries(server, trained, small_world):
    _, base = server
    spec = small_world.spec
    lat, lon = spec.grid.pixel_to_geo(40, 40)
    doc = test_query_doc(spec, "svc_rf", window_size=K)
    doc["spatial"] = {"type": "point", "coordinates": [[lat, lon]]}
    status, body = call_json(base + "/v2/query", doc)
    assert status == 200 and body["results"][0]["label"] == small_world.class_at(40, 40)
    del doc["model"]
    status, body = call_json(base + "/v2/query", doc)
    assert status == 200
    assert body["points"][0]["values"]["red"] == float(small_world.bands["red"][40, 40])


def test_error_codes(server, small_world):
    _, base = server
    status, _, raw = call(base + "/v2/query", None)
    assert status == 404  # GET on the query route
    req = urllib.request.Request(base + "/v2/query", data=b"{nope", method="POST")
    try:
        urllib.request.urlopen(req, timeout=10)
    except urllib.error.HTTPError as err:
        assert err.code == 400 and json.loads(err.read())["error"] == "QuerySyntaxError"
    doc = test_query_doc(small_world.spec, "missing", BOX, window_size=K)
    status, body = call_json(base + "/v2/query", doc)
    assert status == 404 and body["error"] == "UnknownModel"
    doc["layers"].append({"type": "raster", "id": "nope"})
    doc["model"]["id"] = "svc_rf"
    status, body = call_json(base + "/v2/query", doc)
    assert status == 422 and any("nope" in v for v in body["violations"])
    assert call_json(base + "/v2/jobs/job-999999")[0] == 404
    assert call_json(base + "/v2/models/none")[0] == 404
    assert call_json(base + "/v2/elsewhere")[0] == 404
