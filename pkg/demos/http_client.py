"""
Drive the HTTP service from Python.

Starts a server on a free port over a freshly ingested synthetic world,
submits a training query, polls the job, and requests a classification map
as JSON and as a PPM image. The same routes are served by ``autogeo serve``.
"""

import json
import sys
import tempfile
import threading
import time
import urllib.request
from pathlib import Path

from autogeo.config import Settings
from autogeo.raster_store import RasterStore
from autogeo.registry import ModelRegistry
from autogeo.service import AutogeoService
from autogeo.synth import (
    default_world,
    emit_label_manifest,
    gen_synthetic_world,
    ingest_world,
    test_query_doc,
    train_query_doc,
)


def post(url, doc, accept="application/json"):
    req = urllib.request.Request(url, data=json.dumps(doc).encode(), method="POST",
                                 headers={"Accept": accept})
    with urllib.request.urlopen(req) as resp:
        return resp.status, resp.read()


def get(url):
    with urllib.request.urlopen(url) as resp:
        return json.loads(resp.read())


def main(workdir):
    workdir = Path(workdir)
    spec = default_world(384, 512, seed=5)
    world = gen_synthetic_world(spec)
    store = RasterStore(workdir / "store", spec.grid)
    ingest_world(world, store)
    service = AutogeoService(store, ModelRegistry(workdir / "models"),
                             Settings(validation=10, test=10, workers=2))
    httpd = service.make_server("127.0.0.1", 0)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    base = "http://%s:%d" % httpd.server_address[:2]
    print("serving on", base)

    manifest, _ = emit_label_manifest(world, 40, window_size=16, seed=1)
    doc = train_query_doc(spec, manifest, "random_forest", "http_rf", window_size=16,
                          params={"grid": {"n_estimators": [20], "max_depth": [8]}})
    status, body = post(base + "/v2/query", doc)
    job_id = json.loads(body)["job_id"]
    print(status, "job", job_id)
    while (job := get(f"{base}/v2/jobs/{job_id}"))["status"] not in ("done", "failed"):
        time.sleep(0.5)
    print("job", job["status"], "accuracy", job.get("report", {}).get("accuracy"))
    print("models:", get(base + "/v2/models"))

    tdoc = test_query_doc(spec, "http_rf", (0, 0, 384, 512), window_size=16)
    _, raw = post(base + "/v2/query", tdoc)
    cmap = json.loads(raw)
    print(f"map {cmap['rows']}x{cmap['cols']}, classes {cmap['classes']}")
    _, ppm = post(base + "/v2/query", tdoc, accept="image/x-portable-pixmap")
    (workdir / "http_map.ppm").write_bytes(ppm)
    print("PPM written to", workdir / "http_map.ppm")
    httpd.shutdown()
    service.jobs.shutdown()


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="autogeo-"))
