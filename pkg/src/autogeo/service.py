"""
HTTP surface (standard-library server).

    POST /v2/query           query document; train -> 202 {"job_id"}, test -> result,
                             no model block -> raw pixel values
                             (``?overwrite=1`` lets training replace a model)
    GET  /v2/jobs/{job_id}   training job status and report
    GET  /v2/models          registered model ids
    GET  /v2/models/{id}     model record metadata

Area inference results are JSON unless the request sends
``Accept: image/x-portable-pixmap``, in which case the map is returned as a
binary PPM. Training runs in a background thread, one job per model id.
"""

from __future__ import annotations

import itertools
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlsplit

from .config import Settings
from .errors import AutogeoError, InvalidQuery, ModelExists, QueryError, UnknownModel
from .maps import ClassificationMap
from .orchestrator import SplitSpec, run_data_query, run_inference_query, run_training_query
from .query import Temporal, parse_duration, parse_query
from .raster_store import RasterStore
from .registry import ModelRegistry

log = logging.getLogger(__name__)

PPM_TYPE = "image/x-portable-pixmap"
MAX_BODY = 256 * 1024 * 1024


class Jobs:
    """Training jobs, at most one active per model id."""

    def __init__(self, max_workers=2):
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="train")
        self._lock = threading.Lock()
        self._jobs = {}
        self._active = {}  # model id -> job id
        self._ids = itertools.count(1)

    def submit(self, model_id, fn):
        with self._lock:
            if model_id in self._active:
                raise ModelExists(f"model {model_id!r} is already training "
                                  f"(job {self._active[model_id]})")
            job_id = f"job-{next(self._ids):06d}"
            self._jobs[job_id] = {"job_id": job_id, "model_id": model_id, "status": "queued"}
            self._active[model_id] = job_id
        self._pool.submit(self._run, job_id, model_id, fn)
        return job_id

    def _run(self, job_id, model_id, fn):
        self._update(job_id, status="running")
        try:
            report = fn()
        except Exception as exc:  # reported through the job record
            log.exception("training job %s failed", job_id)
            self._update(job_id, status="failed", error={"type": type(exc).__name__,
                                                         "message": str(exc)})
        else:
            self._update(job_id, status="done", report=report.to_dict())
        finally:
            with self._lock:
                self._active.pop(model_id, None)

    def _update(self, job_id, **fields):
        with self._lock:
            self._jobs[job_id].update(fields)

    def get(self, job_id):
        with self._lock:
            job = self._jobs.get(job_id)
            return None if job is None else dict(job)

    def wait(self, job_id, timeout=None):
        """Block until a job leaves queued/running (testing and scripting helper)."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            job = self.get(job_id)
            if job is None or job["status"] in ("done", "failed"):
                return job
            if deadline is not None and time.monotonic() > deadline:
                return job
            time.sleep(0.02)

    def shutdown(self):
        self._pool.shutdown(wait=True)


class AutogeoService:
    def __init__(self, store: RasterStore, registry: ModelRegistry, settings: Settings = Settings()):
        self.store = store
        self.registry = registry
        self.settings = settings
        self.jobs = Jobs()

    def _with_defaults(self, spec):
        if spec.temporal.search_window is None:
            spec = replace(spec, temporal=Temporal(spec.temporal.snapshot,
                                                   parse_duration(self.settings.search_window)))
        return spec

    def query(self, body: bytes, *, overwrite: bool = False):
        """Dispatch a query document; returns (status, payload)."""
        spec = self._with_defaults(parse_query(body))
        workers = self.settings.workers
        if spec.model is None:
            return HTTPStatus.OK, run_data_query(spec, self.store)
        if spec.model.mode == "train":
            split = SplitSpec(self.settings.validation, self.settings.test)

            def train():
                return run_training_query(spec, self.store, self.registry, workers=workers,
                                          split=split, overwrite=overwrite)[1]

            if self.registry.exists(spec.model.id) and not overwrite:
                raise ModelExists(f"model {spec.model.id!r} already exists")
            return HTTPStatus.ACCEPTED, {"job_id": self.jobs.submit(spec.model.id, train)}
        return HTTPStatus.OK, run_inference_query(spec, self.store, self.registry, workers=workers)

    def make_server(self, host="127.0.0.1", port=8080) -> ThreadingHTTPServer:
        service = self

        class Handler(_Handler):
            pass

        Handler.service = service
        server = ThreadingHTTPServer((host, port), Handler)
        server.daemon_threads = True
        return server


_ERROR_STATUS = (
    (UnknownModel, HTTPStatus.NOT_FOUND),
    (ModelExists, HTTPStatus.CONFLICT),
    (InvalidQuery, HTTPStatus.UNPROCESSABLE_ENTITY),
    (QueryError, HTTPStatus.BAD_REQUEST),
    (AutogeoError, HTTPStatus.UNPROCESSABLE_ENTITY),
    (ValueError, HTTPStatus.BAD_REQUEST),
)


def error_payload(exc):
    doc = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, InvalidQuery):
        doc["violations"] = exc.violations
    return doc


class _Handler(BaseHTTPRequestHandler):
    service: AutogeoService
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.info("%s - %s", self.address_string(), fmt % args)

    def _send(self, status, body: bytes, content_type):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status, doc):
        self._send(status, (json.dumps(doc, indent=1) + "\n").encode("utf-8"), "application/json")

    def _fail(self, exc):
        for kind, status in _ERROR_STATUS:
            if isinstance(exc, kind):
                return self._json(status, error_payload(exc))
        log.exception("unhandled error")
        return self._json(HTTPStatus.INTERNAL_SERVER_ERROR, error_payload(exc))

    def do_POST(self):
        url = urlsplit(self.path)
        path = url.path.rstrip("/")
        overwrite = parse_qs(url.query).get("overwrite", ["0"])[-1] in ("1", "true", "yes")
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            return self._json(HTTPStatus.REQUEST_ENTITY_TOO_LARGE, {"error": "body too large"})
        body = self.rfile.read(length)
        if path != "/v2/query":
            return self._json(HTTPStatus.NOT_FOUND, {"error": f"no route {path!r}"})
        try:
            status, result = self.service.query(body, overwrite=overwrite)
        except Exception as exc:
            return self._fail(exc)
        if isinstance(result, ClassificationMap):
            if PPM_TYPE in (self.headers.get("Accept") or ""):
                return self._send(status, result.to_ppm(), PPM_TYPE)
            return self._json(status, result.to_dict())
        if isinstance(result, list):
            return self._json(status, {"results": [r.to_dict() for r in result]})
        return self._json(status, result)

    def do_GET(self):
        parts = [unquote(p) for p in urlsplit(self.path).path.strip("/").split("/")]
        try:
            if parts[:2] == ["v2", "jobs"] and len(parts) == 3:
                job = self.service.jobs.get(parts[2])
                if job is None:
                    return self._json(HTTPStatus.NOT_FOUND, {"error": f"unknown job {parts[2]!r}"})
                return self._json(HTTPStatus.OK, job)
            if parts == ["v2", "models"]:
                return self._json(HTTPStatus.OK, {"models": self.service.registry.list()})
            if parts[:2] == ["v2", "models"] and len(parts) == 3:
                return self._json(HTTPStatus.OK, self.service.registry.get(parts[2]).metadata())
        except Exception as exc:
            return self._fail(exc)
        return self._json(HTTPStatus.NOT_FOUND, {"error": f"no route {self.path!r}"})


def serve(store: RasterStore, registry: ModelRegistry, settings: Settings, host="127.0.0.1",
          port=8080):
    service = AutogeoService(store, registry, settings)
    server = service.make_server(host, port)
    log.info("listening on http://%s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.jobs.shutdown()
